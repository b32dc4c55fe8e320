use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{ConfigError, RunConfig};
use super::run::{format_rate, run_with_provider, RunError, RunOutcome};
use crate::backend::BackendProvider;
use crate::baselines::ScParams;
use crate::refine::FeedbackKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Axis {
    TopN,
    IgSteps,
    ScParams,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::TopN => "TOP_N",
            Axis::IgSteps => "IG_STEPS",
            Axis::ScParams => "SC_PARAMS",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "TOP_N" => Ok(Axis::TopN),
            "IG_STEPS" => Ok(Axis::IgSteps),
            "SC_PARAMS" | "SC" => Ok(Axis::ScParams),
            _ => Err(format!("unknown axis `{s}` (TOP_N, IG_STEPS, SC_PARAMS)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AxisValue {
    Count(usize),
    Sc { n: usize, temperature: f64 },
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Count(n) => write!(f, "{n}"),
            AxisValue::Sc { n, temperature } => write!(f, "{n}:{temperature}"),
        }
    }
}

/// Parse a comma-separated list: integers for `TOP_N` and `IG_STEPS`,
/// `n:temperature` pairs for `SC_PARAMS`.
pub fn parse_values(axis: Axis, raw: &str) -> Result<Vec<AxisValue>, String> {
    let items: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err("no values given".into());
    }
    items
        .into_iter()
        .map(|item| match axis {
            Axis::TopN | Axis::IgSteps => match item.parse::<usize>() {
                Ok(v) if v > 0 => Ok(AxisValue::Count(v)),
                _ => Err(format!("`{item}` is not a positive integer")),
            },
            Axis::ScParams => {
                let (n, t) = item
                    .split_once(':')
                    .ok_or_else(|| format!("`{item}` is not of the form n:temperature"))?;
                let n: usize = n.parse().map_err(|_| format!("bad sample count in `{item}`"))?;
                let temperature: f64 = t.parse().map_err(|_| format!("bad temperature in `{item}`"))?;
                if n == 0 || !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(format!("`{item}` needs n >= 1 and a positive temperature"));
                }
                Ok(AxisValue::Sc { n, temperature })
            }
        })
        .collect()
}

/// The config for one sweep point, writing into its own subdirectory.
pub fn apply(config: &RunConfig, axis: Axis, value: &AxisValue) -> Result<RunConfig, ConfigError> {
    let mut c = config.clone();
    match (axis, value) {
        (Axis::TopN, AxisValue::Count(n)) => {
            let mut any = false;
            for s in c.strategies.iter_mut().filter(|s| s.kind.is_iwf()) {
                s.n_words = *n;
                any = true;
            }
            if !any {
                return Err(ConfigError("TOP_N needs an important-word strategy".into()));
            }
        }
        (Axis::IgSteps, AxisValue::Count(n)) => {
            let s = c
                .strategies
                .iter_mut()
                .find(|s| s.kind == FeedbackKind::IwfIg)
                .ok_or_else(|| ConfigError("IG_STEPS needs the IWF_IG strategy".into()))?;
            s.ig_steps = *n;
        }
        (Axis::ScParams, AxisValue::Sc { n, temperature }) => {
            c.sc = Some(ScParams {
                n: *n,
                temperature: *temperature,
            });
        }
        _ => return Err(ConfigError(format!("value {value} does not fit axis {axis}"))),
    }
    c.output_dir = config.output_dir.join(format!(
        "{}_{}",
        axis.as_str().to_ascii_lowercase(),
        value.to_string().replace(':', "_")
    ));
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: String,
    pub dataset: String,
    pub model: String,
    pub method: String,
    pub round: usize,
    pub n_counter: usize,
    pub n_unfaithful: usize,
    pub rate: Option<f64>,
    pub convergence_delta: Option<f64>,
}

pub fn sweep_rows(axis: Axis, value: &AxisValue, outcome: &RunOutcome) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for r in &outcome.summary.reports {
        for pr in &r.per_round {
            rows.push(SweepRow {
                axis,
                value: value.to_string(),
                dataset: r.dataset.clone(),
                model: r.model.clone(),
                method: r.method.clone(),
                round: pr.round,
                n_counter: pr.n_counter,
                n_unfaithful: pr.n_unfaithful,
                rate: pr.unfaithfulness,
                convergence_delta: r.diagnostics.mean_convergence_delta,
            });
        }
    }
    rows
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "axis",
        "value",
        "dataset",
        "model",
        "method",
        "round",
        "n_counter",
        "n_unfaithful",
        "rate",
        "convergence_delta",
    ])?;
    for r in rows {
        w.write_record([
            r.axis.as_str().to_string(),
            r.value.clone(),
            r.dataset.clone(),
            r.model.clone(),
            r.method.clone(),
            r.round.to_string(),
            r.n_counter.to_string(),
            r.n_unfaithful.to_string(),
            format_rate(r.rate),
            r.convergence_delta.map_or_else(String::new, |d| format!("{d:.6e}")),
        ])?;
    }
    w.flush()
}

/// One run per value; the sweep table goes to `<output_dir>/sweep.csv`.
pub fn ablate(
    config: &RunConfig,
    axis: Axis,
    values: &[AxisValue],
    provider: Arc<dyn BackendProvider>,
) -> Result<Vec<SweepRow>, RunError> {
    // check every point before running any
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|v| apply(config, axis, v))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (c, v) in configs.iter().zip(values) {
        log::info!("ablation {axis} = {v}");
        let outcome = run_with_provider(c, Arc::clone(&provider))?;
        rows.extend(sweep_rows(axis, v, &outcome));
    }
    let out = config.output_path();
    std::fs::create_dir_all(&out)?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_parsing() {
        assert_eq!(parse_values(Axis::TopN, "1, 2,3").unwrap().len(), 3);
        assert!(parse_values(Axis::TopN, "0").is_err());
        assert!(parse_values(Axis::IgSteps, "x").is_err());
        assert_eq!(
            parse_values(Axis::ScParams, "5:0.5").unwrap(),
            vec![AxisValue::Sc { n: 5, temperature: 0.5 }]
        );
        assert!(parse_values(Axis::ScParams, "5").is_err());
        assert!(parse_values(Axis::ScParams, "5:0").is_err());
        assert_eq!("top-n".parse::<Axis>().unwrap(), Axis::TopN);
    }

    #[test]
    fn incompatible_axis() {
        let c = RunConfig::parse(
            r#"
task = "COMVE"
dataset = "d"
interventions = "i"
output_dir = "out"
[[strategies]]
kind = "IWF_ATTN"
[backend]
kind = "mock"
model_tag = "m"
"#,
        )
        .unwrap();
        assert!(apply(&c, Axis::IgSteps, &AxisValue::Count(10)).is_err());
        let t = apply(&c, Axis::TopN, &AxisValue::Count(3)).unwrap();
        assert_eq!(t.strategies[0].n_words, 3);
        assert_eq!(t.output_dir, Path::new("out/top_n_3"));
        let s = apply(&c, Axis::ScParams, &AxisValue::Sc { n: 5, temperature: 0.5 }).unwrap();
        assert_eq!(s.output_dir, Path::new("out/sc_params_5_0.5"));
    }
}
