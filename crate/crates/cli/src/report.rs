//! The run-level text report assembled from subcommand manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use acros_core::backpack::Conversion;

use crate::manifest::ExperimentManifest;

fn section(s: &mut String, title: &str) {
    let _ = writeln!(s, "\n== {title} ==");
}

fn table_or_missing(s: &mut String, runs: &BTreeMap<&str, ExperimentManifest>, cmd: &str, table: &str) {
    match runs.get(cmd).and_then(|m| m.tables.get(table)) {
        Some(t) => s.push_str(t),
        None => {
            let _ = writeln!(s, "(not run: {cmd})");
        }
    }
}

/// Conversion bottleneck rows: base, ACROS, then every Backpack variant.
fn bottleneck(s: &mut String, runs: &BTreeMap<&str, ExperimentManifest>) {
    let acros = runs.get("induce");
    let base_ppl = acros.and_then(|m| m.metric("acros.ppl_base")).or_else(|| runs.get("train-base").and_then(|m| m.metric("base.ppl")));
    let acros_ppl = acros.and_then(|m| m.metric("acros.ppl"));
    let _ = writeln!(s, "{:<28}{:>4}{:>8}{:>12}{:>10}{:>12}", "model", "K", "steps", "PPL", "x ACROS", "separation");
    let ratio = |p: f64| acros_ppl.map(|a| format!("{:.3}", p / a)).unwrap_or_else(|| "-".into());
    if let Some(p) = base_ppl {
        let steps = runs.get("train-base").and_then(|m| m.metric("base.steps")).map(|x| format!("{x}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:<28}{:>4}{:>8}{:>12.4}{:>10}{:>12}", "base (frozen)", "-", steps, p, ratio(p), "-");
    }
    if let (Some(m), Some(p)) = (acros, acros_ppl) {
        let k = m.metric("acros.k").unwrap_or(0.0);
        let steps = m.metric("acros.steps").unwrap_or(0.0);
        let sep = m.metric("acros.separation").unwrap_or(f64::NAN);
        let _ = writeln!(s, "{:<28}{:>4}{:>8}{:>12.4}{:>10}{:>+12.4}", "ACROS", k, steps, p, ratio(p), sep);
    }
    if let Some(m) = runs.get("convert-backpack") {
        let k = m.metric("backpack.k").unwrap_or(0.0);
        for v in Conversion::ALL {
            let key = |x: &str| format!("backpack.{}.{x}", v.name());
            if let Some(p) = m.metric(&key("ppl")) {
                let steps = m.metric(&key("steps")).unwrap_or(0.0);
                let sep = m.metric(&key("separation")).unwrap_or(f64::NAN);
                let _ = writeln!(s, "{:<28}{:>4}{:>8}{:>12.4}{:>10}{:>+12.4}", format!("Backpack ({})", v.name()), k, steps, p, ratio(p), sep);
            }
        }
    } else {
        let _ = writeln!(s, "(not run: convert-backpack)");
    }
    if let (Some(b), Some(a)) = (base_ppl, acros_ppl) {
        let _ = writeln!(s, "ACROS / base PPL: {:.4}", a / b);
    }
    if let Some(m) = acros {
        let _ = writeln!(
            s,
            "gate {:+.5}, contribution {:.3}%",
            m.metric("acros.gate").unwrap_or(f64::NAN),
            m.metric("acros.contribution_pct").unwrap_or(f64::NAN)
        );
    }
}

fn spectrum(s: &mut String, runs: &BTreeMap<&str, ExperimentManifest>) {
    let Some(m) = runs.get("diagnose-svd") else {
        let _ = writeln!(s, "(not run: diagnose-svd)");
        return;
    };
    let d = m.metric("svd.d").unwrap_or(0.0);
    for (k, v) in &m.metrics {
        if let Some(t) = k.strip_prefix("svd.rank_at.") {
            let _ = writeln!(s, "rank for {t} of variance: {v} of {d}");
        }
    }
    for (k, v) in &m.metrics {
        if let Some(r) = k.strip_prefix("svd.cumvar_at.") {
            let _ = writeln!(s, "variance in the top {r} directions: {v:.4}");
        }
    }
}

pub fn compose(runs: &BTreeMap<&str, ExperimentManifest>) -> String {
    let mut s = String::from("ACROS desk-scale report\n");
    if let Some(m) = runs.values().next() {
        let _ = writeln!(s, "tool: {}\nseed: {}", m.tool, m.seed);
    }
    section(&mut s, "Conversion bottleneck");
    bottleneck(&mut s, runs);
    section(&mut s, "Hidden-state spectrum");
    spectrum(&mut s, runs);
    section(&mut s, "Word sense disambiguation");
    table_or_missing(&mut s, runs, "eval-wsd", "wsd");
    section(&mut s, "Lexical steering");
    table_or_missing(&mut s, runs, "eval-steer", "steer");
    section(&mut s, "Cipher adaptation");
    table_or_missing(&mut s, runs, "adapt", "adapt");
    table_or_missing(&mut s, runs, "eval-retrieval", "retrieval");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(cmd: &str, metrics: &[(&str, f64)], tables: &[(&str, &str)]) -> ExperimentManifest {
        ExperimentManifest {
            tool: "acros test".into(),
            subcommand: cmd.into(),
            seed: 3,
            config: String::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            tables: tables.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            metrics: metrics.iter().map(|(a, b)| (a.to_string(), *b)).collect(),
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn sections_appear_in_order_and_missing_runs_are_named() {
        let mut runs = BTreeMap::new();
        runs.insert("induce", manifest("induce", &[("acros.ppl_base", 4.0), ("acros.ppl", 4.04), ("acros.k", 8.0), ("acros.steps", 200.0)], &[]));
        runs.insert(
            "convert-backpack",
            manifest("convert-backpack", &[("backpack.k", 4.0), ("backpack.cpt.ppl", 8.08), ("backpack.cpt.steps", 200.0)], &[]),
        );
        let text = compose(&runs);
        let order: Vec<usize> = ["Conversion bottleneck", "spectrum", "Word sense", "Lexical steering", "Cipher adaptation"].iter().map(|h| text.find(h).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert!(text.contains("(not run: eval-wsd)"));
        assert!(text.contains("(not run: diagnose-svd)"));
        let cpt = text.lines().find(|l| l.starts_with("Backpack (cpt)")).unwrap();
        assert!(cpt.contains("2.000"), "{cpt}");
        assert!(text.contains("ACROS / base PPL: 1.0100"));
        assert!(text.contains("seed: 3"));
    }
}
