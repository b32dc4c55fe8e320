//! Merging finished runs into tables and plots.
//!
//! CSV files are the stable output. SVG plots are written on a best-effort
//! basis from the same numbers.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use super::run::{format_rate, write_results_csv, RunSummary};
use crate::evaluation::EvalReport;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no runs given")]
    NoRuns,
    #[error("reading {path}: {message}")]
    Read { path: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn load_run(dir: &Path) -> Result<RunSummary, ReportError> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| ReportError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| ReportError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Merged {
    pub reports: Vec<EvalReport>,
    /// Rounds present in every report.
    pub rounds: usize,
    pub warning: Option<String>,
}

/// Concatenate reports, cutting every refinement report to the rounds all of
/// them share.
///
/// Transitions are dropped from cut reports since they span the original
/// last round.
pub fn merge(runs: &[RunSummary]) -> Result<Merged, ReportError> {
    let mut reports: Vec<EvalReport> = runs.iter().flat_map(|r| r.reports.iter().cloned()).collect();
    if reports.is_empty() {
        return Err(ReportError::NoRuns);
    }
    // baselines report a single round and take no part in the cut
    let lengths: BTreeSet<usize> = reports.iter().map(|r| r.per_round.len()).filter(|&n| n > 1).collect();
    let rounds = lengths.first().copied().unwrap_or(1);
    let mut warning = None;
    if lengths.len() > 1 {
        warning = Some(format!(
            "runs cover different numbers of rounds ({lengths:?}); reporting the {rounds} common to all"
        ));
        for r in &mut reports {
            if r.per_round.len() > rounds {
                r.per_round.truncate(rounds);
                r.length_stats.truncate(rounds);
                r.transitions = None;
            }
        }
    }
    Ok(Merged {
        reports,
        rounds,
        warning,
    })
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

/// Write tables and plots for `merged` into `out`; returns the files written.
pub fn write_report(out: &Path, merged: &Merged) -> Result<Vec<String>, ReportError> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    write_results_csv(&out.join("results.csv"), &merged.reports)?;
    written.push("results.csv".to_string());

    let mut w = csv::Writer::from_path(out.join("final.csv")).map_err(csv_err)?;
    w.write_record(["dataset", "model", "method", "round", "n_counter", "rate"])
        .map_err(csv_err)?;
    for r in &merged.reports {
        if let Some(last) = r.per_round.last() {
            w.write_record([
                r.dataset.clone(),
                r.model.clone(),
                r.method.clone(),
                last.round.to_string(),
                last.n_counter.to_string(),
                format_rate(last.unfaithfulness),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    written.push("final.csv".into());

    let mut w = csv::Writer::from_path(out.join("transitions.csv")).map_err(csv_err)?;
    w.write_record([
        "dataset",
        "model",
        "method",
        "from_round",
        "to_round",
        "f_to_f",
        "f_to_u",
        "u_to_f",
        "u_to_u",
        "f_to_u_rate",
        "u_to_f_rate",
    ])
    .map_err(csv_err)?;
    for r in &merged.reports {
        if let Some(t) = &r.transitions {
            w.write_record([
                r.dataset.clone(),
                r.model.clone(),
                r.method.clone(),
                t.from_round.to_string(),
                t.to_round.to_string(),
                t.f_to_f.to_string(),
                t.f_to_u.to_string(),
                t.u_to_f.to_string(),
                t.u_to_u.to_string(),
                format_rate(t.f_to_u_rate),
                format_rate(t.u_to_f_rate),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    written.push("transitions.csv".into());

    let mut w = csv::Writer::from_path(out.join("lengths.csv")).map_err(csv_err)?;
    w.write_record(["dataset", "model", "method", "round", "mean_words", "rate"])
        .map_err(csv_err)?;
    for r in &merged.reports {
        for l in &r.length_stats {
            w.write_record([
                r.dataset.clone(),
                r.model.clone(),
                r.method.clone(),
                l.round.to_string(),
                l.mean_words.map_or_else(String::new, |m| format!("{m:.4}")),
                format_rate(l.unfaithfulness),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    written.push("lengths.csv".into());

    let plots = [
        ("rounds.svg", Some(rounds_plot(merged))),
        ("transitions.svg", Some(transitions_plot(merged))),
        ("lengths.svg", Some(length_plot(merged))),
        ("radar.svg", radar_plot(merged)),
    ];
    for (name, svg) in plots {
        if let Some(svg) = svg {
            match fs::write(out.join(name), svg) {
                Ok(()) => written.push(name.into()),
                Err(e) => log::warn!("skipping {name}: {e}"),
            }
        }
    }
    Ok(written)
}

fn series_name(r: &EvalReport) -> String {
    format!("{} / {} / {}", r.dataset, r.model, r.method)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn svg_open(title: &str, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(svg: &mut String, names: &[String], top: f64) {
    for (i, n) in names.iter().enumerate() {
        let y = top + 14.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<rect x=\"{PAD}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{c}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            y - 9.0,
            PAD + 14.0,
            y,
            escape(n)
        );
    }
}

fn axes(svg: &mut String, x_label: &str, y_label: &str) {
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{}</text>",
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for pct in [0, 25, 50, 75, 100] {
        let y = to_y(pct as f64 / 100.0, 0.0, 1.0);
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{pct}</text>",
            PAD - 4.0,
            y + 4.0
        );
    }
}

fn to_x(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    PAD + (v - lo) / span * (W - 2.0 * PAD)
}

fn to_y(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    H - PAD - (v - lo) / span * (H - 2.0 * PAD)
}

fn with_legend_height(n: usize) -> f64 {
    H + 14.0 * n as f64 + 10.0
}

/// Unfaithfulness per round, one line per report.
pub fn rounds_plot(merged: &Merged) -> String {
    let names: Vec<String> = merged.reports.iter().map(series_name).collect();
    let mut svg = svg_open("Unfaithfulness (%) by round", with_legend_height(names.len()));
    axes(&mut svg, "round", "unfaithfulness (%)");
    let max_round = merged.rounds.saturating_sub(1).max(1) as f64;
    for r in 0..merged.rounds {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{r}</text>",
            to_x(r as f64, 0.0, max_round),
            H - PAD + 14.0
        );
    }
    for (i, rep) in merged.reports.iter().enumerate() {
        let pts: Vec<String> = rep
            .per_round
            .iter()
            .filter_map(|p| p.unfaithfulness.map(|u| (p.round, u)))
            .map(|(r, u)| format!("{:.2},{:.2}", to_x(r as f64, 0.0, max_round), to_y(u, 0.0, 1.0)))
            .collect();
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(svg, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{c}\"/>");
        }
    }
    legend(&mut svg, &names, H + 4.0);
    svg.push_str("</svg>\n");
    svg
}

/// Paired F→U and U→F bars per report.
pub fn transitions_plot(merged: &Merged) -> String {
    let with: Vec<&EvalReport> = merged.reports.iter().filter(|r| r.transitions.is_some()).collect();
    let names = vec!["F→U".to_string(), "U→F".to_string()];
    let mut svg = svg_open("Transitions between first and last round (%)", with_legend_height(2));
    axes(&mut svg, "method", "rate (%)");
    let slot = (W - 2.0 * PAD) / with.len().max(1) as f64;
    for (i, r) in with.iter().enumerate() {
        let t = r.transitions.as_ref().expect("filtered");
        for (j, rate) in [t.f_to_u_rate, t.u_to_f_rate].into_iter().enumerate() {
            let v = rate.unwrap_or(0.0);
            let x = PAD + slot * i as f64 + slot * (0.15 + 0.35 * j as f64);
            let y = to_y(v, 0.0, 1.0);
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                slot * 0.3,
                H - PAD - y,
                PALETTE[j]
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            PAD + slot * (i as f64 + 0.5),
            H - PAD + 14.0,
            escape(&r.method)
        );
    }
    legend(&mut svg, &names, H + 4.0);
    svg.push_str("</svg>\n");
    svg
}

/// Mean explanation length against unfaithfulness, one point per round.
pub fn length_plot(merged: &Merged) -> String {
    let names: Vec<String> = merged.reports.iter().map(series_name).collect();
    let pts: Vec<(usize, f64, f64)> = merged
        .reports
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.length_stats
                .iter()
                .filter_map(move |l| Some((i, l.mean_words?, l.unfaithfulness?)))
        })
        .collect();
    let max_len = pts.iter().map(|p| p.1).fold(1.0, f64::max);
    let mut svg = svg_open("Explanation length vs unfaithfulness", with_legend_height(names.len()));
    axes(
        &mut svg,
        &format!("mean words (max {max_len:.1})"),
        "unfaithfulness (%)",
    );
    for (i, len, u) in pts {
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{}\"/>",
            to_x(len, 0.0, max_len),
            to_y(u, 0.0, 1.0),
            PALETTE[i % PALETTE.len()]
        );
    }
    legend(&mut svg, &names, H + 4.0);
    svg.push_str("</svg>\n");
    svg
}

/// Final-round unfaithfulness per method, one polygon per model.
///
/// Needs at least two models and three methods.
pub fn radar_plot(merged: &Merged) -> Option<String> {
    let models: Vec<String> = merged
        .reports
        .iter()
        .map(|r| r.model.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let methods: Vec<String> = merged
        .reports
        .iter()
        .map(|r| r.method.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if models.len() < 2 || methods.len() < 3 {
        return None;
    }
    let (cx, cy, radius) = (W / 2.0, H / 2.0 + 10.0, H / 2.0 - PAD);
    let angle = |k: usize| std::f64::consts::TAU * k as f64 / methods.len() as f64 - std::f64::consts::FRAC_PI_2;
    let mut svg = svg_open("Final-round unfaithfulness by method", with_legend_height(models.len()));
    for (k, m) in methods.iter().enumerate() {
        let (x, y) = (cx + radius * angle(k).cos(), cy + radius * angle(k).sin());
        let _ = writeln!(
            svg,
            "<line x1=\"{cx}\" y1=\"{cy}\" x2=\"{x:.2}\" y2=\"{y:.2}\" stroke=\"#bbb\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            cx + (radius + 14.0) * angle(k).cos(),
            cy + (radius + 14.0) * angle(k).sin(),
            escape(m)
        );
    }
    for (i, model) in models.iter().enumerate() {
        let pts: Vec<String> = methods
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let v = merged
                    .reports
                    .iter()
                    .filter(|r| &r.model == model && &r.method == m)
                    .filter_map(|r| r.per_round.last()?.unfaithfulness)
                    .next()
                    .unwrap_or(0.0);
                format!(
                    "{:.2},{:.2}",
                    cx + radius * v * angle(k).cos(),
                    cy + radius * v * angle(k).sin()
                )
            })
            .collect();
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<polygon fill=\"{c}\" fill-opacity=\"0.2\" stroke=\"{c}\" points=\"{}\"/>",
            pts.join(" ")
        );
    }
    legend(&mut svg, &models, H + 4.0);
    svg.push_str("</svg>\n");
    Some(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{Diagnostics, RoundRate};

    fn report(model: &str, method: &str, rates: &[(usize, usize)]) -> EvalReport {
        EvalReport {
            dataset: "COMVE".into(),
            model: model.into(),
            method: method.into(),
            n_intervened: 10,
            n_counter: rates[0].1,
            counter_rate: Some(0.3),
            n_failed: 0,
            per_round: rates
                .iter()
                .enumerate()
                .map(|(round, &(u, c))| RoundRate {
                    round,
                    n_counter: c,
                    n_unfaithful: u,
                    unfaithfulness: Some(u as f64 / c as f64),
                })
                .collect(),
            transitions: None,
            length_stats: vec![],
            diagnostics: Diagnostics::default(),
        }
    }

    fn summary(reports: Vec<EvalReport>) -> RunSummary {
        RunSummary {
            reports,
            units: 1,
            failures: 0,
            failure_rate: 0.0,
        }
    }

    #[test]
    fn mismatched_rounds_are_cut() {
        let a = summary(vec![report("m", "x", &[(2, 3), (1, 3), (1, 3)])]);
        let b = summary(vec![report("m", "y", &[(2, 3), (0, 3)])]);
        let m = merge(&[a, b]).unwrap();
        assert_eq!(m.rounds, 2);
        assert!(m.warning.is_some());
        assert!(m.reports.iter().all(|r| r.per_round.len() == 2));
    }

    #[test]
    fn baselines_do_not_cut_rounds() {
        let m = merge(&[summary(vec![
            report("m", "init", &[(2, 3)]),
            report("m", "x", &[(2, 3), (1, 3), (1, 3)]),
        ])])
        .unwrap();
        assert_eq!(m.rounds, 3);
        assert!(m.warning.is_none());
        assert_eq!(m.reports[1].per_round.len(), 3);
    }

    #[test]
    fn radar_needs_two_models() {
        let one = merge(&[summary(vec![
            report("m", "a", &[(1, 2)]),
            report("m", "b", &[(1, 2)]),
            report("m", "c", &[(1, 2)]),
        ])])
        .unwrap();
        assert!(radar_plot(&one).is_none());
        let two = merge(&[
            summary(vec![
                report("m", "a", &[(1, 2)]),
                report("m", "b", &[(1, 2)]),
                report("m", "c", &[(1, 2)]),
            ]),
            summary(vec![
                report("n", "a", &[(1, 2)]),
                report("n", "b", &[(1, 2)]),
                report("n", "c", &[(1, 2)]),
            ]),
        ])
        .unwrap();
        assert!(radar_plot(&two).unwrap().contains("<polygon"));
    }

    #[test]
    fn round_plot_has_one_series_per_report() {
        let m = merge(&[summary(
            ["a", "b", "c", "d"]
                .iter()
                .map(|x| report("m", x, &[(2, 4), (1, 4)]))
                .collect(),
        )])
        .unwrap();
        assert_eq!(rounds_plot(&m).matches("<polyline").count(), 4);
        assert!(merge(&[]).is_err());
    }
}
