use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;

use incparse::counterfactual::{counterfactual_effects, PerturbConfig};
use incparse::embedding::StoreWriter;
use incparse::npz::{
    congruence_nll, disambiguating_action_surprisal, fixture_items, load_items, summarize, surprisal_difference,
    NpzItem, Reading,
};
use incparse::probes::{load_checkpoint, CheckpointHeader, LoadedProbe, Objective};
use incparse::{EmbeddingMatrix, EmbeddingProvider};

use crate::args::{CfxArgs, CfxCommand, NpzArgs, NpzCommand, NpzMode, ObjectiveArg};
use crate::output;
use crate::source::{provider, Trees};

fn items(path: Option<&Path>) -> Result<Vec<NpzItem>> {
    match path {
        Some(p) => load_items(p).with_context(|| format!("loading items {}", p.display())),
        None => Ok(fixture_items()),
    }
}

fn checkpoint(path: Option<&Path>) -> Result<(LoadedProbe, CheckpointHeader)> {
    let path = path.context("this mode needs --ckpt")?;
    Ok(load_checkpoint(path)?)
}

pub fn npz(c: NpzCommand, seed: u64) -> Result<()> {
    let NpzCommand::Run(a) = c;
    run_npz(a, seed)
}

fn run_npz(a: NpzArgs, seed: u64) -> Result<()> {
    let items = items(a.corpus.as_deref())?;
    let source = provider(&a.source, seed, Trees::Items(&items))?;
    let source = source.as_ref();
    let (rows, summary) = match a.mode {
        NpzMode::Behavior => {
            let diffs = items
                .par_iter()
                .map(|item| surprisal_difference(item, source))
                .collect::<incparse::Result<Vec<_>>>()?;
            let summary = serde_json::to_value(summarize(&diffs, a.resamples, seed))?;
            let rows: Vec<_> = items
                .iter()
                .zip(&diffs)
                .map(|(item, d)| json!({ "item": item.id, "surprisal_difference": d }))
                .collect();
            (rows, summary)
        }
        NpzMode::ProbeAction => {
            let (probe, header) = checkpoint(a.ckpt.as_deref())?;
            let layer = a.layer.unwrap_or(header.layer);
            let results = items
                .par_iter()
                .map(|item| disambiguating_action_surprisal(item, probe.as_probe(), source, layer))
                .collect::<incparse::Result<Vec<_>>>()?;
            let columns: Vec<BTreeMap<&str, f64>> =
                results.iter().map(|r| BTreeMap::from([("difference", r.difference)])).collect();
            let summary = serde_json::to_value(summarize(&columns, a.resamples, seed))?;
            let rows = items
                .iter()
                .zip(&results)
                .map(|(item, r)| json!({ "item": item.id, "layer": layer, "action_surprisal": r }))
                .collect();
            (rows, summary)
        }
        NpzMode::Congruence => {
            let (probe, header) = checkpoint(a.ckpt.as_deref())?;
            let layer = a.layer.unwrap_or(header.layer);
            let tables = items
                .par_iter()
                .map(|item| congruence_nll(item, probe.as_probe(), source, layer))
                .collect::<incparse::Result<Vec<_>>>()?;
            let columns: Vec<BTreeMap<Reading, f64>> = tables
                .iter()
                .map(|t| t.readings.iter().map(|(&r, c)| (r, c.difference)).collect())
                .collect();
            let summary = serde_json::to_value(summarize(&columns, a.resamples, seed))?;
            let rows = items
                .iter()
                .zip(&tables)
                .map(|(item, t)| json!({ "item": item.id, "layer": layer, "congruence": t }))
                .collect();
            (rows, summary)
        }
    };
    eprintln!("{} items", items.len());
    output::json_lines(rows.iter().chain(std::iter::once(&json!({
        "summary": summary,
        "resamples": a.resamples,
        "seed": seed,
    }))))
}

pub fn cfx(c: CfxCommand, seed: u64) -> Result<()> {
    let CfxCommand::Run(a) = c;
    run_cfx(a, seed)
}

fn run_cfx(a: CfxArgs, seed: u64) -> Result<()> {
    let items = items(a.corpus.as_deref())?;
    let (probe, header) = load_checkpoint(&a.ckpt)?;
    let layer = a.layer.unwrap_or(header.layer);
    let source = provider(&a.source, seed, Trees::Items(&items))?;
    let config = PerturbConfig {
        epsilon: a.epsilon,
        steps: a.steps,
        objective: match a.objective {
            ObjectiveArg::Prob => Objective::Probability,
            ObjectiveArg::Logprob => Objective::LogProbability,
        },
        ..PerturbConfig::default()
    };
    let effects = counterfactual_effects(&items, &probe, source.as_ref(), layer, &config)?;
    let mut rows = Vec::new();
    let mut by_reading: BTreeMap<Reading, Vec<BTreeMap<_, f64>>> = BTreeMap::new();
    for e in &effects {
        for (reading, r) in &e.readings {
            for (c, v) in &r.effects {
                rows.push(json!({
                    "item": e.item,
                    "layer": layer,
                    "reading": reading,
                    "target": r.target,
                    "continuation": c,
                    "effect": v,
                    "iterations": r.iterations,
                    "probability_before": r.trace.first(),
                    "probability_after": r.trace.last(),
                }));
            }
            by_reading.entry(*reading).or_default().push(r.effects.clone());
        }
    }
    let summary: BTreeMap<Reading, _> = by_reading
        .iter()
        .map(|(r, rows)| (*r, summarize(rows, a.resamples, seed)))
        .collect();
    if let Some(dir) = &a.dump {
        let dim = effects
            .iter()
            .flat_map(|e| e.readings.values())
            .find_map(|r| r.perturbed.as_ref().map(EmbeddingMatrix::dim))
            .unwrap_or(0);
        let mut writer = StoreWriter::create(dir, source.model_tag(), dim, vec![layer])?;
        for (item, e) in items.iter().zip(&effects) {
            for (reading, r) in &e.readings {
                if let Some(m) = &r.perturbed {
                    let id = format!("{}:cfx-{}", item.id, reading.to_string().to_lowercase());
                    let renamed = EmbeddingMatrix::new(id, layer, m.model_tag.clone(), m.vectors().to_owned())?;
                    writer.put(&item.prefix_transitive, &renamed)?;
                }
            }
        }
        writer.finish()?;
    }
    output::json_lines(rows.iter().chain(std::iter::once(&json!({
        "summary": summary,
        "resamples": a.resamples,
        "seed": seed,
        "config": config,
    }))))
}
