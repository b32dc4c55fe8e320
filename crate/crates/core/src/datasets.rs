//! Task datasets and precomputed interventions.
//!
//! Both live on disk as JSON Lines. Instances:
//!
//! ```text
//! {"id": "...", "task": "ECQA", "slots": {"question": "..."},
//!  "options": [["A", "motel"], ...], "gold": "A"}
//! ```
//!
//! Interventions:
//!
//! ```text
//! {"instance_id": "...", "slot": "question", "inserted_word": "cozy",
//!  "edited_text": "...", "index": 1}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Maximum interventions kept per instance.
pub const MAX_INTERVENTIONS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {index}: invalid JSON: {message}")]
    Json { index: usize, message: String },
    #[error("record {index}: missing field `{field}`")]
    MissingField { index: usize, field: String },
    #[error("record {index}: {reason}")]
    Validation { index: usize, reason: String },
    #[error("intervention record {index} references unknown instance `{instance_id}`")]
    UnknownInstance { index: usize, instance_id: String },
    #[error("label distribution of an empty instance list is undefined")]
    Empty,
}

/// The three supported reasoning tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "COMVE", alias = "ComVE", alias = "comve")]
    Comve,
    #[serde(rename = "ECQA", alias = "ecqa")]
    Ecqa,
    #[serde(rename = "ESNLI", alias = "e-SNLI", alias = "esnli")]
    Esnli,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Comve, Task::Ecqa, Task::Esnli];

    /// Input slots in prompt order.
    pub fn slot_names(self) -> &'static [&'static str] {
        match self {
            Task::Comve => &["sentence0", "sentence1"],
            Task::Ecqa => &["question"],
            Task::Esnli => &["premise", "hypothesis"],
        }
    }

    pub fn option_count(self) -> usize {
        match self {
            Task::Comve => 2,
            Task::Ecqa => 5,
            Task::Esnli => 3,
        }
    }

    /// Option texts that are fixed by the task, if any.
    pub fn fixed_options(self) -> Option<&'static [&'static str]> {
        match self {
            Task::Comve => Some(&["Sentence 0", "Sentence 1"]),
            Task::Ecqa => None,
            Task::Esnli => Some(&["Contradiction", "Neutral", "Entailment"]),
        }
    }

    pub fn letters(self) -> Vec<char> {
        ('A'..).take(self.option_count()).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Comve => "COMVE",
            Task::Ecqa => "ECQA",
            Task::Esnli => "ESNLI",
        }
    }

    /// Lowercase key used for template assets and file names.
    pub fn key(self) -> &'static str {
        match self {
            Task::Comve => "comve",
            Task::Ecqa => "ecqa",
            Task::Esnli => "esnli",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "comve" => Ok(Task::Comve),
            "ecqa" => Ok(Task::Ecqa),
            "esnli" => Ok(Task::Esnli),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// One task input with its answer options and gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub task: Task,
    pub slots: IndexMap<String, String>,
    pub options: Vec<(String, String)>,
    pub gold: String,
}

impl Instance {
    pub fn slot(&self, name: &str) -> Option<&str> {
        self.slots.get(name).map(String::as_str)
    }

    pub fn option_letters(&self) -> Vec<char> {
        self.options.iter().filter_map(|(l, _)| l.chars().next()).collect()
    }

    /// Concatenated task input text (slots in order, space separated).
    pub fn input_text(&self) -> String {
        self.slots.values().map(String::as_str).collect::<Vec<_>>().join(" ")
    }

    /// Copy of this instance with one slot replaced by an intervention's text.
    pub fn with_intervention(&self, intervention: &Intervention) -> Instance {
        let mut out = self.clone();
        if let Some(text) = out.slots.get_mut(&intervention.slot) {
            *text = intervention.edited_text.clone();
        }
        out.id = intervention.key();
        out
    }

    /// Check the per-task invariants, normalizing fixed option labels.
    pub fn validate(&mut self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        for name in self.task.slot_names() {
            match self.slots.get(*name) {
                None => return Err(format!("{} instance lacks slot `{name}`", self.task)),
                Some(t) if t.trim().is_empty() => return Err(format!("slot `{name}` is empty")),
                Some(_) => {}
            }
        }
        if let Some(extra) = self
            .slots
            .keys()
            .find(|k| !self.task.slot_names().contains(&k.as_str()))
        {
            return Err(format!("unexpected slot `{extra}` for {}", self.task));
        }
        // keep slot order canonical
        let mut ordered = IndexMap::new();
        for name in self.task.slot_names() {
            ordered.insert((*name).to_string(), self.slots[*name].clone());
        }
        self.slots = ordered;

        let expected = self.task.option_count();
        if self.options.len() != expected {
            return Err(format!(
                "{} requires exactly {expected} options, found {}",
                self.task,
                self.options.len()
            ));
        }
        for (i, (letter, text)) in self.options.iter_mut().enumerate() {
            let want = char::from(b'A' + i as u8).to_string();
            let got = letter.trim().trim_matches(|c| c == '(' || c == ')');
            if got != want {
                return Err(format!("option {i} has letter `{letter}`, expected `{want}`"));
            }
            *letter = want;
            if text.trim().is_empty() {
                return Err(format!("option {} is empty", letter));
            }
            if let Some(fixed) = self.task.fixed_options() {
                if !text.trim().eq_ignore_ascii_case(fixed[i]) {
                    return Err(format!(
                        "option {letter} of {} must be `{}`, found `{text}`",
                        self.task, fixed[i]
                    ));
                }
                *text = fixed[i].to_string();
            }
        }
        let gold = self.gold.trim().trim_matches(|c| c == '(' || c == ')').to_string();
        if !self.options.iter().any(|(l, _)| *l == gold) {
            return Err(format!("gold label `{}` is not an option letter", self.gold));
        }
        self.gold = gold;
        Ok(())
    }
}

/// An edited copy of one slot of an instance: a single inserted word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub instance_id: String,
    pub slot: String,
    pub inserted_word: String,
    pub edited_text: String,
    pub index: u32,
}

impl Intervention {
    /// Lowercased, punctuation-stripped inserted word used for matching.
    pub fn normalized_word(&self) -> String {
        crate::text::normalize_word(&self.inserted_word)
    }

    /// Stable identifier of the intervened instance.
    pub fn key(&self) -> String {
        format!("{}#{}", self.instance_id, self.index)
    }
}

/// If `edited` equals `original` plus exactly one inserted whitespace token,
/// return that token and its position.
///
/// Tokens are compared verbatim, so `cozy,` and `cozy` differ.
pub fn single_inserted_token<'a>(original: &str, edited: &'a str) -> Option<(usize, &'a str)> {
    let orig: Vec<&str> = original.split_whitespace().collect();
    let edit: Vec<&str> = edited.split_whitespace().collect();
    if edit.len() != orig.len() + 1 {
        return None;
    }
    let pos = orig.iter().zip(&edit).position(|(a, b)| a != b).unwrap_or(orig.len());
    if orig[pos..] == edit[pos + 1..] {
        Some((pos, edit[pos]))
    } else {
        None
    }
}

/// Remove the whitespace token at `pos` and rejoin with single spaces.
pub fn remove_inserted_word(edited: &str, pos: usize) -> Option<String> {
    let mut tokens: Vec<&str> = edited.split_whitespace().collect();
    if pos >= tokens.len() {
        return None;
    }
    tokens.remove(pos);
    Some(tokens.join(" "))
}

/// Check that `intervention` inserts exactly `inserted_word` into `original`.
pub fn check_one_word_diff(original: &str, intervention: &Intervention) -> Result<(), String> {
    match single_inserted_token(original, &intervention.edited_text) {
        None => Err(format!(
            "edited text is not a single-word insertion into the `{}` slot",
            intervention.slot
        )),
        Some((_, token)) if token != intervention.inserted_word => Err(format!(
            "inserted token `{token}` does not equal inserted_word `{}`",
            intervention.inserted_word
        )),
        Some(_) => Ok(()),
    }
}

fn parse_record(index: usize, line: &str, required: &[&str]) -> Result<Value, DatasetError> {
    let value: Value = serde_json::from_str(line).map_err(|e| DatasetError::Json {
        index,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| DatasetError::Json {
        index,
        message: "record is not a JSON object".into(),
    })?;
    if let Some(missing) = required.iter().find(|f| !obj.contains_key(**f)) {
        return Err(DatasetError::MissingField {
            index,
            field: (*missing).to_string(),
        });
    }
    Ok(value)
}

/// Parse and validate instances from JSONL text.
pub fn parse_instances(text: &str, task: Task) -> Result<Vec<Instance>, DatasetError> {
    let mut out = Vec::new();
    for (index, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let value = parse_record(index, line, &["id", "task", "slots", "options", "gold"])?;
        let mut inst: Instance = serde_json::from_value(value).map_err(|e| DatasetError::Json {
            index,
            message: e.to_string(),
        })?;
        if inst.task != task {
            return Err(DatasetError::Validation {
                index,
                reason: format!("record task {} does not match requested {task}", inst.task),
            });
        }
        inst.validate()
            .map_err(|reason| DatasetError::Validation { index, reason })?;
        out.push(inst);
    }
    Ok(out)
}

/// Load a task dataset, in file order.
pub fn load_dataset(path: impl AsRef<Path>, task: Task) -> Result<Vec<Instance>, DatasetError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let instances = parse_instances(&raw, task)?;
    let mut seen = HashSet::new();
    for (index, inst) in instances.iter().enumerate() {
        if !seen.insert(inst.id.as_str()) {
            return Err(DatasetError::Validation {
                index,
                reason: format!("duplicate instance id `{}`", inst.id),
            });
        }
    }
    Ok(instances)
}

/// Serialize instances to JSONL.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    fs::write(path, out)
}

/// A rejected intervention record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

/// Validated interventions grouped by instance, with load accounting.
#[derive(Debug, Clone, Default)]
pub struct InterventionSet {
    pub by_instance: IndexMap<String, Vec<Intervention>>,
    pub rejected: Vec<Rejection>,
    pub duplicates: usize,
    pub over_limit: usize,
}

impl InterventionSet {
    pub fn total(&self) -> usize {
        self.by_instance.values().map(Vec::len).sum()
    }

    pub fn for_instance(&self, id: &str) -> &[Intervention] {
        self.by_instance.get(id).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Validate intervention records against their instances.
///
/// Records failing the one-word-diff check are rejected and logged; repeated
/// `(slot, edited_text)` pairs are dropped; at most [`MAX_INTERVENTIONS`] are
/// kept per instance. A record naming an unknown instance is a hard error.
pub fn validate_interventions(
    records: Vec<(usize, Intervention)>,
    instances: &[Instance],
) -> Result<InterventionSet, DatasetError> {
    let index: HashMap<&str, &Instance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut set = InterventionSet::default();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    for (rec_index, iv) in records {
        let Some(inst) = index.get(iv.instance_id.as_str()) else {
            return Err(DatasetError::UnknownInstance {
                index: rec_index,
                instance_id: iv.instance_id,
            });
        };
        let Some(original) = inst.slot(&iv.slot) else {
            let reason = format!("instance has no slot `{}`", iv.slot);
            log::warn!("intervention record {rec_index} rejected: {reason}");
            set.rejected.push(Rejection {
                index: rec_index,
                reason,
            });
            continue;
        };
        if iv.index == 0 || iv.index as usize > MAX_INTERVENTIONS {
            let reason = format!("index {} outside 1..={MAX_INTERVENTIONS}", iv.index);
            log::warn!("intervention record {rec_index} rejected: {reason}");
            set.rejected.push(Rejection {
                index: rec_index,
                reason,
            });
            continue;
        }
        if let Err(reason) = check_one_word_diff(original, &iv) {
            log::warn!("intervention record {rec_index} rejected: {reason}");
            set.rejected.push(Rejection {
                index: rec_index,
                reason,
            });
            continue;
        }
        let key = (iv.instance_id.clone(), iv.slot.clone(), iv.edited_text.clone());
        if !seen.insert(key) {
            set.duplicates += 1;
            continue;
        }
        let list = set.by_instance.entry(iv.instance_id.clone()).or_default();
        if list.len() >= MAX_INTERVENTIONS {
            set.over_limit += 1;
            continue;
        }
        if list.iter().any(|o| o.index == iv.index) {
            let reason = format!("duplicate index {} for `{}`", iv.index, iv.instance_id);
            log::warn!("intervention record {rec_index} rejected: {reason}");
            set.rejected.push(Rejection {
                index: rec_index,
                reason,
            });
            continue;
        }
        list.push(iv);
    }
    if set.duplicates > 0 {
        log::warn!("dropped {} duplicate interventions", set.duplicates);
    }
    Ok(set)
}

/// Parse intervention JSONL text and validate it against `instances`.
pub fn parse_interventions(text: &str, instances: &[Instance]) -> Result<InterventionSet, DatasetError> {
    let mut records = Vec::new();
    for (index, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let value = parse_record(
            index,
            line,
            &["instance_id", "slot", "inserted_word", "edited_text", "index"],
        )?;
        let iv: Intervention = serde_json::from_value(value).map_err(|e| DatasetError::Json {
            index,
            message: e.to_string(),
        })?;
        records.push((index, iv));
    }
    validate_interventions(records, instances)
}

/// Load interventions from a JSONL file.
pub fn load_interventions(path: impl AsRef<Path>, instances: &[Instance]) -> Result<InterventionSet, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_interventions(&text, instances)
}

/// Fraction of instances per gold letter.
pub fn label_distribution(instances: &[Instance]) -> Result<BTreeMap<String, f64>, DatasetError> {
    if instances.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for inst in instances {
        *counts.entry(inst.gold.clone()).or_default() += 1;
    }
    let n = instances.len() as f64;
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn esnli_line(id: &str, gold: &str) -> String {
        format!(
            r#"{{"id":"{id}","task":"ESNLI","slots":{{"premise":"A guy riding a motorcycle near junk cars.","hypothesis":"A man is riding a motorcycle."}},"options":[["A","contradiction"],["(B)","Neutral"],["C","ENTAILMENT"]],"gold":"{gold}"}}"#
        )
    }

    fn comve(id: &str, gold: &str) -> Instance {
        let mut slots = IndexMap::new();
        slots.insert("sentence0".into(), "Leafs help plants absorb nutrition.".into());
        slots.insert("sentence1".into(), "The leafs are useless.".into());
        Instance {
            id: id.into(),
            task: Task::Comve,
            slots,
            options: vec![("A".into(), "Sentence 0".into()), ("B".into(), "Sentence 1".into())],
            gold: gold.into(),
        }
    }

    #[test]
    fn esnli_options_are_canonical() {
        let got = parse_instances(&esnli_line("e1", "C"), Task::Esnli).unwrap();
        let texts: Vec<&str> = got[0].options.iter().map(|(_, t)| t.as_str()).collect();
        assert_eq!(texts, ["Contradiction", "Neutral", "Entailment"]);
        let letters: Vec<&str> = got[0].options.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(letters, ["A", "B", "C"]);
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_instances("", Task::Ecqa).unwrap().is_empty());
        assert!(parse_instances("\n\n", Task::Ecqa).unwrap().is_empty());
    }

    #[test]
    fn ecqa_with_four_options_fails() {
        let line = r#"{"id":"q","task":"ECQA","slots":{"question":"Where?"},"options":[["A","a"],["B","b"],["C","c"],["D","d"]],"gold":"A"}"#;
        let err = parse_instances(line, Task::Ecqa).unwrap_err();
        assert!(matches!(err, DatasetError::Validation { index: 0, .. }), "{err}");
    }

    #[test]
    fn missing_field_is_named() {
        let line = r#"{"id":"q","task":"ECQA","slots":{"question":"Where?"},"gold":"A"}"#;
        let err = parse_instances(
            &format!("{}\n{line}", esnli_line("x", "A").replace("ESNLI", "ECQA")),
            Task::Ecqa,
        )
        .unwrap_err();
        // first record fails validation (wrong slots) before the second is read
        assert!(matches!(err, DatasetError::Validation { index: 0, .. }));
        let err = parse_instances(line, Task::Ecqa).unwrap_err();
        match err {
            DatasetError::MissingField { index, field } => {
                assert_eq!(index, 0);
                assert_eq!(field, "options");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn gold_must_be_an_option() {
        let err = parse_instances(&esnli_line("e", "D"), Task::Esnli).unwrap_err();
        assert!(err.to_string().contains("gold"));
    }

    fn iv(word: &str, edited: &str, index: u32) -> Intervention {
        Intervention {
            instance_id: "c1".into(),
            slot: "sentence1".into(),
            inserted_word: word.into(),
            edited_text: edited.into(),
            index,
        }
    }

    #[test]
    fn one_word_insertion_is_accepted() {
        let set = validate_interventions(
            vec![(0, iv("fallen", "The fallen leafs are useless.", 1))],
            &[comve("c1", "B")],
        )
        .unwrap();
        assert_eq!(set.total(), 1);
        assert!(set.rejected.is_empty());
    }

    #[test]
    fn identical_text_is_rejected() {
        let set = validate_interventions(
            vec![(0, iv("fallen", "The leafs are useless.", 1))],
            &[comve("c1", "B")],
        )
        .unwrap();
        assert_eq!(set.total(), 0);
        assert_eq!(set.rejected.len(), 1);
    }

    #[test]
    fn attached_punctuation_is_rejected() {
        let set = validate_interventions(
            vec![(0, iv("dry", "The leafs are dry, useless.", 1))],
            &[comve("c1", "B")],
        )
        .unwrap();
        assert_eq!(set.rejected.len(), 1);
    }

    #[test]
    fn duplicates_are_dropped_and_counted() {
        let set = validate_interventions(
            vec![
                (0, iv("fallen", "The fallen leafs are useless.", 1)),
                (1, iv("fallen", "The fallen leafs are useless.", 2)),
            ],
            &[comve("c1", "B")],
        )
        .unwrap();
        assert_eq!(set.total(), 1);
        assert_eq!(set.duplicates, 1);
    }

    #[test]
    fn unknown_instance_is_an_error() {
        let mut bad = iv("fallen", "The fallen leafs are useless.", 1);
        bad.instance_id = "nope".into();
        let err = validate_interventions(vec![(3, bad)], &[comve("c1", "B")]).unwrap_err();
        assert!(matches!(err, DatasetError::UnknownInstance { index: 3, .. }));
    }

    #[test]
    fn at_most_twenty_per_instance() {
        let adjectives: Vec<String> = (0..22).map(|i| format!("adj{i}")).collect();
        let records = adjectives
            .iter()
            .enumerate()
            .map(|(i, a)| (i, iv(a, &format!("The {a} leafs are useless."), (i % 20) as u32 + 1)))
            .collect();
        let set = validate_interventions(records, &[comve("c1", "B")]).unwrap();
        assert_eq!(set.total(), 20);
        assert_eq!(set.over_limit, 2);
    }

    #[test]
    fn comve_distribution_matches_counts() {
        let mut v: Vec<Instance> = (0..480).map(|i| comve(&format!("a{i}"), "A")).collect();
        v.extend((0..520).map(|i| comve(&format!("b{i}"), "B")));
        let d = label_distribution(&v).unwrap();
        assert!((d["A"] - 0.48).abs() < 1e-12);
        assert!((d["B"] - 0.52).abs() < 1e-12);
    }

    #[test]
    fn single_instance_distribution() {
        let d = label_distribution(&[comve("x", "A")]).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d["A"], 1.0);
        assert!(matches!(label_distribution(&[]), Err(DatasetError::Empty)));
    }

    #[test]
    fn ecqa_fixture_distribution_hand_count() {
        // golds: A A B C C C D E E E -> A 2, B 1, C 3, D 1, E 3
        let golds = ["A", "A", "B", "C", "C", "C", "D", "E", "E", "E"];
        let text: String = golds
            .iter()
            .enumerate()
            .map(|(i, g)| {
                format!(
                    r#"{{"id":"q{i}","task":"ECQA","slots":{{"question":"Where is item {i}?"}},"options":[["A","a"],["B","b"],["C","c"],["D","d"],["E","e"]],"gold":"{g}"}}"#
                ) + "\n"
            })
            .collect();
        let v = parse_instances(&text, Task::Ecqa).unwrap();
        let d = label_distribution(&v).unwrap();
        let expect = [("A", 0.2), ("B", 0.1), ("C", 0.3), ("D", 0.1), ("E", 0.3)];
        for (k, f) in expect {
            assert!((d[k] - f).abs() < 1e-12, "{k}");
        }
        assert!((d.values().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn word() -> impl Strategy<Value = String> {
        "[a-zA-Z][a-z]{0,7}[.,]?"
    }

    proptest! {
        #[test]
        fn removing_inserted_word_restores_original(
            words in prop::collection::vec(word(), 1..12),
            insert in "[a-z]{1,8}",
            pos in 0usize..12,
        ) {
            let pos = pos % (words.len() + 1);
            let original = words.join(" ");
            let mut edited_words = words.clone();
            edited_words.insert(pos, insert.clone());
            let edited = edited_words.join(" ");
            let (at, token) = single_inserted_token(&original, &edited).unwrap();
            prop_assert_eq!(token, insert.as_str());
            let restored = remove_inserted_word(&edited, at).unwrap();
            prop_assert_eq!(restored, original);
        }

        #[test]
        fn instance_round_trip(
            q in "[A-Za-z ]{1,40}[a-z]",
            opts in prop::collection::vec("[a-z]{1,10}", 5),
            gold in 0usize..5,
        ) {
            let mut slots = IndexMap::new();
            slots.insert("question".to_string(), q);
            let inst = Instance {
                id: "id".into(),
                task: Task::Ecqa,
                slots,
                options: opts.iter().enumerate().map(|(i, o)| (char::from(b'A' + i as u8).to_string(), o.clone())).collect(),
                gold: char::from(b'A' + gold as u8).to_string(),
            };
            let line = serde_json::to_string(&inst).unwrap();
            let back = parse_instances(&line, Task::Ecqa).unwrap();
            prop_assert_eq!(&back[0], &inst);
        }

        #[test]
        fn distribution_sums_to_one(golds in prop::collection::vec(0usize..5, 1..60)) {
            let v: Vec<Instance> = golds.iter().enumerate().map(|(i, g)| {
                let mut c = comve(&i.to_string(), "A");
                c.gold = if g % 2 == 0 { "A".into() } else { "B".into() };
                c
            }).collect();
            let d = label_distribution(&v).unwrap();
            prop_assert!(d.values().all(|f| *f >= 0.0));
            prop_assert!((d.values().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
