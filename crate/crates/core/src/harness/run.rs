use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ConfigError, RunConfig};
use crate::backend::{BackendError, BackendProvider};
use crate::baselines::{sc_nle, CandidateSet};
use crate::cache::{GenerationCache, Generator};
use crate::datasets::{load_dataset, load_interventions, write_jsonl, Instance, Intervention};
use crate::evaluation::{evaluate, find_counters, mean, CounterInstance, CounterScan, EvalReport, MethodResults};
use crate::prompts::{ParseStatus, ParsedAnswer, PromptBundle};
use crate::refine::{AnswerOutcome, FeedbackKind, Pipeline, RefineError, RefinementTrace};

pub const INIT_METHOD: &str = "Init-NLE";
pub const SC_METHOD: &str = "SC-NLE";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("writing outputs: {0}")]
    Io(#[from] io::Error),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => 1,
            RunError::Backend(_) => 2,
        }
    }
}

/// One failed unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub kind: String,
    pub message: String,
}

impl FailureRecord {
    fn new(stage: &str, id: &str, method: Option<&str>, err: &RefineError) -> Self {
        FailureRecord {
            stage: stage.into(),
            id: id.into(),
            method: method.map(str::to_string),
            kind: err.kind().into(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub instance_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervention_index: Option<u32>,
    pub prediction: ParsedAnswer,
}

/// The explanations one method produced for one counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub method: String,
    pub counter: String,
    pub explanations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub method: String,
    pub counter: String,
    pub trace: RefinementTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub method: String,
    pub counter: String,
    pub inserted_word: String,
    pub important_words: Vec<String>,
    pub scores: crate::attribution::WordScoreList,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub dataset: String,
    pub model: String,
    pub methods: Vec<String>,
    pub rounds: usize,
    pub n_instances: usize,
    pub n_interventions: usize,
    pub rejected_interventions: usize,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub reports: Vec<EvalReport>,
    pub units: usize,
    pub failures: usize,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub predict_secs: f64,
    pub explain_secs: f64,
    pub total_secs: f64,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub summary: RunSummary,
    pub counters: Vec<CounterInstance>,
    pub failures: Vec<FailureRecord>,
    pub timing: Timing,
}

impl RunOutcome {
    /// 0 on success, 2 when failures exceed the configured share.
    pub fn exit_code(&self, max_failure_rate: f64) -> i32 {
        if self.summary.failure_rate > max_failure_rate {
            2
        } else {
            0
        }
    }

    pub fn report(&self, method: &str) -> Option<&EvalReport> {
        self.summary.reports.iter().find(|r| r.method == method)
    }
}

/// Run `f` over `items` on up to `workers` threads, each with its own
/// backend handle; results keep the order of `items`.
fn parallel_map<T, R, F>(
    provider: &dyn BackendProvider,
    cache: &GenerationCache,
    workers: usize,
    items: &[T],
    f: F,
) -> Result<Vec<R>, BackendError>
where
    T: Sync,
    R: Send,
    F: Fn(&mut Generator<'_>, &T) -> R + Sync,
{
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers.clamp(1, items.len()))
            .map(|_| {
                s.spawn(|| -> Result<(), BackendError> {
                    let mut backend = provider.open()?;
                    let mut generator = Generator::new(backend.as_mut(), cache);
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(item) = items.get(i) else { break };
                        let r = f(&mut generator, item);
                        *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("worker panicked"))
    })?;
    Ok(slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every item processed")
        })
        .collect())
}

fn failed_parse() -> ParsedAnswer {
    ParsedAnswer {
        letter: None,
        raw: String::new(),
        status: ParseStatus::Failed,
        span: None,
    }
}

/// What every method produced for one counter.
struct CounterWork {
    init: Option<Result<String, RefineError>>,
    traces: Vec<Result<RefinementTrace, RefineError>>,
    sc: Option<Result<CandidateSet, RefineError>>,
}

pub fn method_names(config: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    if config.init_baseline {
        out.push(INIT_METHOD.to_string());
    }
    if config.sc.is_some() {
        out.push(SC_METHOD.to_string());
    }
    out.extend(config.strategies.iter().map(|s| s.kind.label().to_string()));
    out
}

/// Build the backend from the config and run.
pub fn run(config: &RunConfig) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let provider = config
        .backend
        .provider(&config.base_dir)
        .map_err(|e| ConfigError(e.to_string()))?;
    run_with_provider(config, provider)
}

pub fn run_with_provider(config: &RunConfig, provider: Arc<dyn BackendProvider>) -> Result<RunOutcome, RunError> {
    let started = Instant::now();
    config.validate()?;
    config.check_capabilities(&provider.capabilities())?;
    let instances =
        load_dataset(config.resolve(&config.dataset), config.task).map_err(|e| ConfigError(e.to_string()))?;
    let ivs = load_interventions(config.resolve(&config.interventions), &instances)
        .map_err(|e| ConfigError(e.to_string()))?;
    for r in &ivs.rejected {
        log::warn!("rejected intervention: {r:?}");
    }
    let bundle = match &config.templates_dir {
        Some(d) => {
            PromptBundle::with_overrides(config.task, &config.resolve(d)).map_err(|e| ConfigError(e.to_string()))?
        }
        None => PromptBundle::builtin(config.task),
    };
    let cache = match config.cache_path() {
        Some(dir) => GenerationCache::open(dir)?,
        None => GenerationCache::disabled(),
    };
    let out_dir = config.output_path();
    fs::create_dir_all(&out_dir)?;

    // Originals first, then every intervened variant.
    let mut items: Vec<(Instance, Option<Intervention>)> = instances.iter().map(|i| (i.clone(), None)).collect();
    for inst in &instances {
        for iv in ivs.for_instance(&inst.id) {
            items.push((inst.with_intervention(iv), Some(iv.clone())));
        }
    }
    let limits = &config.limits;
    let answers = parallel_map(provider.as_ref(), &cache, config.parallelism, &items, |g, (inst, _)| {
        Pipeline {
            generator: g,
            bundle: &bundle,
            limits,
        }
        .answer(inst)
    })?;
    let predict_secs = started.elapsed().as_secs_f64();

    let mut failures = Vec::new();
    let mut predictions = Vec::with_capacity(items.len());
    let mut originals = BTreeMap::new();
    let mut intervened = Vec::new();
    let mut outcomes: BTreeMap<String, (&Instance, &AnswerOutcome)> = BTreeMap::new();
    for ((inst, iv), answer) in items.iter().zip(&answers) {
        let parsed = match answer {
            Ok(a) => a.parsed.clone(),
            Err(e) => {
                failures.push(FailureRecord::new("predict", &inst.id, None, e));
                failed_parse()
            }
        };
        predictions.push(PredictionRecord {
            id: inst.id.clone(),
            instance_id: iv.as_ref().map_or(inst.id.clone(), |iv| iv.instance_id.clone()),
            intervention_index: iv.as_ref().map(|iv| iv.index),
            prediction: parsed.clone(),
        });
        match iv {
            None => {
                originals.insert(inst.id.clone(), parsed);
            }
            Some(iv) => {
                if let Ok(a) = answer {
                    outcomes.insert(inst.id.clone(), (inst, a));
                }
                intervened.push((iv.clone(), parsed));
            }
        }
    }
    let scan = find_counters(&originals, &intervened);

    let explain_started = Instant::now();
    let counter_items: Vec<(&Instance, &AnswerOutcome)> =
        scan.counters.iter().map(|c| outcomes[&c.intervened_id]).collect();
    let work = parallel_map(
        provider.as_ref(),
        &cache,
        config.parallelism,
        &counter_items,
        |g, (inst, answer)| {
            let mut p = Pipeline {
                generator: g,
                bundle: &bundle,
                limits,
            };
            let letter = answer.letter();
            CounterWork {
                init: config.init_baseline.then(|| {
                    let letter = letter.as_ref().map_err(|_| RefineError::Unanswerable).copied()?;
                    p.initial_explanation(inst, letter).map(|(e, _, _)| e)
                }),
                sc: config.sc.as_ref().map(|params| {
                    let letter = letter.as_ref().map_err(|_| RefineError::Unanswerable).copied()?;
                    sc_nle(&mut p, inst, letter, params, Some(config.seed))
                }),
                traces: config
                    .strategies
                    .iter()
                    .map(|s| p.run_trace(inst, answer, s, config.rounds))
                    .collect(),
            }
        },
    )?;
    let explain_secs = explain_started.elapsed().as_secs_f64();

    let dataset = config.dataset_label();
    let model = provider.model_tag().to_string();
    let inputs: Vec<String> = counter_items.iter().map(|(inst, _)| inst.input_text()).collect();
    let mut reports = Vec::new();
    let mut explanation_records = Vec::new();
    let mut trace_records = Vec::new();
    let mut attribution_records = Vec::new();
    let mut sc_records = Vec::new();
    let base = |method: &'static str, explanations: Vec<Option<Vec<String>>>| MethodResults {
        dataset: &dataset,
        model: &model,
        method,
        scan: &scan,
        explanations,
        words: vec![None; scan.counters.len()],
        inputs: inputs.clone(),
        mode: config.match_mode,
        max_n: config.diagnostics_max_n,
    };
    let mut record = |method: &str, counter: &CounterInstance, es: &[String]| {
        explanation_records.push(ExplanationRecord {
            method: method.into(),
            counter: counter.intervened_id.clone(),
            explanations: es.to_vec(),
        })
    };

    if config.init_baseline {
        let mut explanations = Vec::new();
        for (c, w) in scan.counters.iter().zip(&work) {
            match w.init.as_ref().expect("init requested") {
                Ok(e) => {
                    record(INIT_METHOD, c, std::slice::from_ref(e));
                    explanations.push(Some(vec![e.clone()]));
                }
                Err(e) => {
                    failures.push(FailureRecord::new("explain", &c.intervened_id, Some(INIT_METHOD), e));
                    explanations.push(None);
                }
            }
        }
        reports.push(evaluate(&base(INIT_METHOD, explanations)));
    }
    if config.sc.is_some() {
        let mut explanations = Vec::new();
        for (c, w) in scan.counters.iter().zip(&work) {
            match w.sc.as_ref().expect("sc requested") {
                Ok(set) => {
                    record(SC_METHOD, c, &[set.chosen().to_string()]);
                    explanations.push(Some(vec![set.chosen().to_string()]));
                    sc_records.push(set.clone());
                }
                Err(e) => {
                    failures.push(FailureRecord::new("explain", &c.intervened_id, Some(SC_METHOD), e));
                    explanations.push(None);
                }
            }
        }
        reports.push(evaluate(&base(SC_METHOD, explanations)));
    }
    for (si, strategy) in config.strategies.iter().enumerate() {
        let method = strategy.kind.label();
        let mut explanations = Vec::new();
        let mut words = Vec::new();
        let mut deltas = Vec::new();
        for (c, w) in scan.counters.iter().zip(&work) {
            match &w.traces[si] {
                Ok(t) => {
                    record(method, c, &t.explanations);
                    explanations.push(Some(t.explanations.clone()));
                    let pair = t.feedbacks.first().and_then(|f| f.words()).zip(t.word_scores.as_ref());
                    if let Some((iw, ws)) = pair {
                        attribution_records.push(AttributionRecord {
                            method: method.into(),
                            counter: c.intervened_id.clone(),
                            inserted_word: c.intervention.inserted_word.clone(),
                            important_words: iw.words.clone(),
                            scores: ws.clone(),
                            convergence_delta: t.convergence_delta,
                        });
                    }
                    words.push(pair);
                    deltas.extend(t.convergence_delta);
                    trace_records.push(TraceRecord {
                        method: method.into(),
                        counter: c.intervened_id.clone(),
                        trace: t.clone(),
                    });
                }
                Err(e) => {
                    failures.push(FailureRecord::new("explain", &c.intervened_id, Some(method), e));
                    explanations.push(None);
                    words.push(None);
                }
            }
        }
        let mut results = base(method, explanations);
        results.words = words;
        let mut report = evaluate(&results);
        if strategy.kind == FeedbackKind::IwfIg {
            report.diagnostics.mean_convergence_delta = mean(deltas);
        }
        reports.push(report);
    }

    let units = items.len() + scan.counters.len() * method_names(config).len();
    let summary = RunSummary {
        reports,
        units,
        failures: failures.len(),
        failure_rate: if units == 0 {
            0.0
        } else {
            failures.len() as f64 / units as f64
        },
    };
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config.hash(),
        dataset,
        model,
        methods: method_names(config),
        rounds: config.rounds,
        n_instances: instances.len(),
        n_interventions: ivs.total(),
        rejected_interventions: ivs.rejected.len() + ivs.duplicates + ivs.over_limit,
    };
    let timing = Timing {
        predict_secs,
        explain_secs,
        total_secs: started.elapsed().as_secs_f64(),
        cache_hits: cache.hits(),
        cache_misses: cache.misses(),
    };

    write_json(&out_dir.join("manifest.json"), &manifest)?;
    write_jsonl(out_dir.join("predictions.jsonl"), &predictions)?;
    write_jsonl(out_dir.join("counters.jsonl"), &scan.counters)?;
    write_jsonl(out_dir.join("explanations.jsonl"), &explanation_records)?;
    write_jsonl(out_dir.join("traces.jsonl"), &trace_records)?;
    write_jsonl(out_dir.join("attributions.jsonl"), &attribution_records)?;
    write_jsonl(out_dir.join("sc_candidates.jsonl"), &sc_records)?;
    write_jsonl(out_dir.join("failures.jsonl"), &failures)?;
    write_json(&out_dir.join("report.json"), &summary)?;
    write_results_csv(&out_dir.join("results.csv"), &summary.reports)?;
    write_json(&out_dir.join("timing.json"), &timing)?;
    log_scan(&scan);

    Ok(RunOutcome {
        manifest,
        summary,
        counters: scan.counters,
        failures,
        timing,
    })
}

fn log_scan(scan: &CounterScan) {
    log::info!(
        "{} counters among {} intervened instances ({} failed originals, {} failed variants)",
        scan.counters.len(),
        scan.n_intervened,
        scan.failed_originals,
        scan.failed_intervened
    );
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Percent with four decimals; empty when undefined.
pub fn format_rate(rate: Option<f64>) -> String {
    rate.map_or_else(String::new, |r| format!("{:.4}", r * 100.0))
}

pub const RESULTS_HEADER: [&str; 7] = [
    "dataset",
    "model",
    "method",
    "round",
    "n_counter",
    "n_unfaithful",
    "rate",
];

pub fn write_results_csv(path: &Path, reports: &[EvalReport]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in reports {
        for pr in &r.per_round {
            w.write_record([
                r.dataset.clone(),
                r.model.clone(),
                r.method.clone(),
                pr.round.to_string(),
                pr.n_counter.to_string(),
                pr.n_unfaithful.to_string(),
                format_rate(pr.unfaithfulness),
            ])?;
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_formatting() {
        assert_eq!(format_rate(Some(273.0 / 392.0)), "69.6429");
        assert_eq!(format_rate(None), "");
        assert_eq!(format_rate(Some(0.0)), "0.0000");
    }
}
