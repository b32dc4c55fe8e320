#!/usr/bin/env python3
"""Stdio backend for srnle backed by a Hugging Face causal language model.

Reads one JSON request per line on stdin and answers with one JSON line on
stdout. Token offsets on the wire are Python string indices.

    python scripts/hf_backend.py --model gpt2 --model-tag gpt2

Attention is the final-layer attention averaged over heads, taken from one
teacher-forced pass. Integrated gradients run over input embeddings from an
all-EOS baseline to the real sequence, scoring the log-probability of each
answer token, with the midpoint rule.
"""

import argparse
import json
import os
import sys
from collections import OrderedDict

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer, GPT2Config, GPT2LMHeadModel


class BackendError(Exception):
    def __init__(self, message, kind="protocol", retryable=False, **extra):
        super().__init__(message)
        self.kind = kind
        self.retryable = retryable
        self.extra = extra

    def payload(self):
        return {"error": str(self), "retryable": self.retryable, "kind": self.kind, **self.extra}


def invalid(message):
    return BackendError(message, kind="invalid_request")


def tiny_tokenizer():
    # byte-level BPE fitted on a few lines; covers any input through byte fallback
    from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers
    from transformers import PreTrainedTokenizerFast

    tok = Tokenizer(models.BPE())
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    trainer = trainers.BpeTrainer(
        vocab_size=400,
        show_progress=False,
        special_tokens=["<|endoftext|>"],
        initial_alphabet=pre_tokenizers.ByteLevel.alphabet(),
    )
    corpus = [
        "Which statement of the two is against common sense?",
        "Sentence 0: Sentence 1: Answer: Explanation: Feedback: Refined Explanation:",
        "The important words you received are: the most important words that contributed",
    ]
    tok.train_from_iterator(corpus, trainer)
    return PreTrainedTokenizerFast(tokenizer_object=tok, eos_token="<|endoftext|>")


def tiny_model(seed, vocab_size):
    # random weights; for protocol smoke tests only
    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=vocab_size, n_layer=2, n_head=2, n_embd=32, n_positions=4096, bos_token_id=0, eos_token_id=0
    )
    config._attn_implementation = "eager"
    return GPT2LMHeadModel(config)


class HfBackend:
    def __init__(self, args):
        self.model_tag = args.model_tag
        self.chat = args.chat
        self.ig_batch = max(1, args.ig_batch)
        if args.random_tiny:
            self.tokenizer = tiny_tokenizer()
            self.model = tiny_model(args.seed, len(self.tokenizer))
        else:
            self.tokenizer = AutoTokenizer.from_pretrained(args.tokenizer or args.model)
            self.model = AutoModelForCausalLM.from_pretrained(args.model, attn_implementation="eager")
        if not self.tokenizer.is_fast:
            raise SystemExit("a fast tokenizer is required for character offsets")
        self.model.eval()
        self.model.requires_grad_(False)
        self.context_window = args.context_window or getattr(self.model.config, "max_position_embeddings", 2048)
        eos = self.tokenizer.eos_token_id
        if eos is None:
            raise SystemExit("the tokenizer has no EOS token")
        self.eos_id = eos
        self.embedder = None
        if args.embed_model:
            from sentence_transformers import SentenceTransformer

            self.embedder = SentenceTransformer(args.embed_model)
        # token ids of recent generations, so attribution sees the exact ids
        self.recent = OrderedDict()

    # tokenization

    def frame(self, prompt):
        """Model input text and the char range the prompt occupies in it."""
        if not self.chat:
            return prompt, 0
        marker = "\u0000PROMPT\u0000"
        text = self.tokenizer.apply_chat_template(
            [{"role": "user", "content": marker}], tokenize=False, add_generation_prompt=True
        )
        head, tail = text.split(marker, 1)
        return head + prompt + tail, len(head)

    def encode_prompt(self, prompt):
        """Input ids, and (index, start, end) for each id overlapping the prompt."""
        text, offset = self.frame(prompt)
        enc = self.tokenizer(text, return_offsets_mapping=True, add_special_tokens=not self.chat)
        ids = enc["input_ids"]
        lo, hi = offset, offset + len(prompt)
        spans = []
        cursor = 0
        for i, (s, e) in enumerate(enc["offset_mapping"]):
            if e <= lo or s >= hi or e <= s:
                continue
            end = min(e, hi) - lo
            if end > cursor:
                spans.append((i, cursor, end))
                cursor = end
        if spans:
            i, s, _ = spans[-1]
            spans[-1] = (i, s, len(prompt))
        elif prompt:
            raise invalid("prompt produced no tokens")
        return ids, spans

    def output_spans(self, ids):
        """Decoded text of `ids` and a tiling of it, one piece per id."""
        text = self.tokenizer.decode(ids, skip_special_tokens=True)
        spans = []
        cursor = 0
        for k in range(1, len(ids) + 1):
            prefix = self.tokenizer.decode(ids[:k], skip_special_tokens=True)
            common = 0
            for a, b in zip(prefix, text):
                if a != b:
                    break
                common += 1
            end = max(cursor, common)
            spans.append((cursor, end))
            cursor = end
        if spans:
            spans[-1] = (spans[-1][0], len(text))
        return text, spans

    @staticmethod
    def wire_tokens(text, spans):
        return [{"text": text[s:e], "start": s, "end": e} for s, e in spans]

    # ops

    def info(self, _req):
        caps = ["attention", "generate", "gradients", "embed"]
        return {"model_tag": self.model_tag, "capabilities": caps}

    def generate(self, req):
        prompt = req["prompt"]
        decoding = req.get("decoding") or {}
        max_new = int(decoding.get("max_new_tokens", 0))
        if max_new <= 0:
            raise invalid("max_new_tokens must be positive")
        ids, spans = self.encode_prompt(prompt)
        if len(ids) + max_new > self.context_window:
            raise BackendError(
                "prompt does not fit the context window",
                kind="context_overflow",
                prompt_tokens=len(ids),
                max_new_tokens=max_new,
                context_window=self.context_window,
            )
        kwargs = {"max_new_tokens": max_new, "pad_token_id": self.eos_id}
        if decoding.get("mode") == "SAMPLE":
            if decoding.get("seed") is not None:
                torch.manual_seed(int(decoding["seed"]))
            kwargs.update(do_sample=True, temperature=float(decoding["temperature"]), top_k=0, top_p=1.0)
        else:
            kwargs.update(do_sample=False)
        inputs = torch.tensor([ids])
        with torch.no_grad():
            out = self.model.generate(inputs, attention_mask=torch.ones_like(inputs), **kwargs)
        new = out[0, len(ids) :].tolist()
        specials = set(self.tokenizer.all_special_ids)
        cut = next((k for k, t in enumerate(new) if t in specials), len(new))
        new = new[:cut]
        text, out_spans = self.output_spans(new)
        self.remember(prompt, text, ids, new)
        return {
            "text": text,
            "prompt_tokens": self.wire_tokens(prompt, [(s, e) for _, s, e in spans]),
            "output_tokens": self.wire_tokens(text, out_spans),
        }

    def remember(self, prompt, text, ids, new):
        self.recent[(prompt, text)] = (ids, new)
        self.recent.move_to_end((prompt, text))
        while len(self.recent) > 256:
            self.recent.popitem(last=False)

    def sequence(self, req):
        """Prompt ids, prompt rows, output ids and the answer span of a request."""
        prompt = req["prompt"]
        generation = req["generation"]
        text = generation["text"]
        n_out = len(generation["output_tokens"])
        n_prompt = len(generation["prompt_tokens"])
        start, end = req["answer_span"]
        if not 0 <= start < end <= n_out:
            raise invalid(f"answer span {start}..{end} outside {n_out} output tokens")
        ids, spans = self.encode_prompt(prompt)
        cached = self.recent.get((prompt, text))
        new = cached[1] if cached else self.tokenizer(text, add_special_tokens=False)["input_ids"]
        if len(spans) != n_prompt or len(new) != n_out:
            raise invalid("token layout differs from this backend's tokenization")
        return ids, [i for i, _, _ in spans], new, (start, end)

    def attention(self, req):
        ids, rows, new, (start, end) = self.sequence(req)
        seq = ids + new[: end - 1]
        inputs = torch.tensor([seq])
        with torch.no_grad():
            out = self.model(inputs, attention_mask=torch.ones_like(inputs), output_attentions=True)
        if not out.attentions:
            raise BackendError("model returned no attention weights", kind="capability", capability="attention")
        last = out.attentions[-1][0].mean(dim=0)
        positions = rows + [len(ids) + k for k in range(end - 1)]
        values = [[0.0] * (end - start) for _ in positions]
        for j, t in enumerate(range(start, end)):
            query = len(ids) + t - 1
            for r, p in enumerate(positions):
                if p <= query:
                    values[r][j] = abs(float(last[query, p]))
        return {"values": values, "convergence_delta": None}

    def target_logprob(self, embeds, target):
        logits = self.model(inputs_embeds=embeds).logits[:, -1, :].float()
        return torch.log_softmax(logits, dim=-1)[:, target]

    def gradients(self, req):
        steps = int(req.get("steps") or 0)
        if steps <= 0:
            raise invalid("integrated gradients needs at least one step")
        ids, rows, new, (start, end) = self.sequence(req)
        table = self.model.get_input_embeddings()
        eos = table(torch.tensor([self.eos_id]))[0].detach()
        positions = rows + [len(ids) + k for k in range(end - 1)]
        values = [[0.0] * (end - start) for _ in positions]
        delta_sum = 0.0
        for j, t in enumerate(range(start, end)):
            context = torch.tensor(ids + new[:t])
            x = table(context).detach()
            base = eos.expand_as(x)
            diff = x - base
            grad_sum = torch.zeros_like(x)
            alphas = [(k + 0.5) / steps for k in range(steps)]
            for b in range(0, steps, self.ig_batch):
                chunk = torch.tensor(alphas[b : b + self.ig_batch], dtype=x.dtype).view(-1, 1, 1)
                point = (base.unsqueeze(0) + chunk * diff.unsqueeze(0)).requires_grad_(True)
                score = self.target_logprob(point, new[t]).sum()
                (grad,) = torch.autograd.grad(score, point)
                grad_sum += grad.sum(dim=0)
            attributions = (grad_sum / steps * diff).sum(dim=-1)
            if not torch.isfinite(attributions).all():
                raise BackendError(
                    "non-finite gradient",
                    kind="non_finite",
                    target=t,
                    token=req["generation"]["output_tokens"][t]["text"],
                )
            with torch.no_grad():
                gap = self.target_logprob(x.unsqueeze(0), new[t]) - self.target_logprob(base.unsqueeze(0), new[t])
            delta_sum += abs(float(attributions.sum()) - float(gap[0]))
            for r, p in enumerate(positions):
                if p < len(context):
                    values[r][j] = abs(float(attributions[p]))
        return {"values": values, "convergence_delta": delta_sum / (end - start)}

    def embed(self, req):
        texts = req["texts"]
        if self.embedder is not None:
            vectors = self.embedder.encode(texts, convert_to_numpy=True)
            return {"embeddings": [[float(x) for x in v] for v in vectors]}
        out = []
        for text in texts:
            ids = self.tokenizer(text, add_special_tokens=False)["input_ids"] or [self.eos_id]
            inputs = torch.tensor([ids])
            with torch.no_grad():
                hidden = self.model(inputs, output_hidden_states=True).hidden_states[-1][0]
            out.append([float(x) for x in hidden.mean(dim=0)])
        return {"embeddings": out}

    def handle(self, req):
        op = req.get("op")
        handler = {
            "info": self.info,
            "generate": self.generate,
            "attention": self.attention,
            "gradients": self.gradients,
            "embed": self.embed,
        }.get(op)
        if handler is None:
            raise invalid(f"unknown op `{op}`")
        return handler(req)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--model", default="gpt2", help="model name or local path")
    parser.add_argument("--tokenizer", help="tokenizer name or path, if it differs from the model")
    parser.add_argument("--model-tag", help="tag reported by `info`; defaults to --model")
    parser.add_argument("--chat", action="store_true", help="wrap prompts in the tokenizer's chat template")
    parser.add_argument("--context-window", type=int, default=0)
    parser.add_argument("--ig-batch", type=int, default=16, help="interpolation points per IG forward pass")
    parser.add_argument("--embed-model", help="sentence-transformers model for `embed`")
    parser.add_argument("--random-tiny", action="store_true", help="use a tiny randomly initialised model")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    args.model_tag = args.model_tag or args.model
    # native code may print to fd 1; only replies go to the real stdout
    sys.stdout.flush()
    out = os.fdopen(os.dup(1), "w", encoding="utf-8")
    os.dup2(2, 1)
    sys.stdout = sys.stderr
    backend = HfBackend(args)
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            reply = backend.handle(json.loads(line))
        except BackendError as e:
            reply = e.payload()
        except (KeyError, TypeError, ValueError) as e:
            reply = invalid(f"bad request: {e}").payload()
        except Exception as e:  # noqa: BLE001
            reply = BackendError(f"{type(e).__name__}: {e}", kind="protocol").payload()
        out.write(json.dumps(reply) + "\n")
        out.flush()


if __name__ == "__main__":
    main()
