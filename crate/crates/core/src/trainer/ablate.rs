use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{StepRecord, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::metrics::MetricReport;
use crate::scalar::Scalar;

/// Arms of the reference ablation that this implementation does not build.
pub const ABSENT_ARMS: &[&str] = &["RAFT GRU"];

/// One variant: the base configuration with the fields in `set` replaced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationArm {
    pub name: String,
    #[serde(default)]
    pub set: toml::Table,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default)]
    pub base: TrainConfig,
    #[serde(default)]
    pub arms: Vec<AblationArm>,
    /// Seeds to repeat every arm with; empty means the base seed only.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.base.validate()?;
        for arm in &spec.arms {
            spec.arm_config(arm)?;
        }
        Ok(spec)
    }

    /// The base configuration with the arm's overrides, and the dotted paths
    /// of every field that differs from the base.
    pub fn arm_config(&self, arm: &AblationArm) -> Result<(TrainConfig, Vec<String>)> {
        let mut value = toml::Table::try_from(&self.base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, &arm.set);
        let cfg: TrainConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("arm {}: {e}", arm.name)))?;
        cfg.validate()?;
        let changed = diff(&self.base, &cfg);
        let allowed = flatten(&arm.set);
        if let Some(extra) = changed.iter().find(|k| !allowed.contains_key(*k)) {
            return Err(Error::Config(format!("arm {} changes {extra} which it does not set", arm.name)));
        }
        Ok((cfg, changed))
    }

    fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        }
    }
}

fn merge(into: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

fn flatten(t: &toml::Table) -> BTreeMap<String, toml::Value> {
    fn walk(prefix: &str, t: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(sub) => walk(&key, sub, out),
                _ => {
                    out.insert(key, v.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", t, &mut out);
    out
}

/// Dotted paths of fields whose values differ between two configurations.
pub fn diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let fa = flatten(&toml::Table::try_from(a).expect("config serializes"));
    let fb = flatten(&toml::Table::try_from(b).expect("config serializes"));
    fa.keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub init: bool,
    pub blocks: usize,
    pub loss: LossKind,
    pub metrics: MetricReport,
    pub config_hash: String,
    pub changed: Vec<String>,
    pub history: Vec<StepRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Arm | Init. | #blocks | Loss | Seed | EPE | 1px | Fl | WAUC |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:?} | {} | {:.4} | {:.4} | {:.4} | {:.2} |",
                r.arm,
                if r.init { "yes" } else { "no" },
                r.blocks,
                r.loss,
                r.seed,
                m.epe,
                m.px1,
                m.fl_all,
                m.wauc
            );
        }
        for a in ABSENT_ARMS {
            let _ = writeln!(s, "| {a} | - | - | - | - | not built | | | |");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,seed,init,blocks,loss,epe,px1,fl,wauc,config_hash,changed\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{:?},{},{},{},{},{},{}",
                r.arm,
                r.seed,
                r.init,
                r.blocks,
                r.loss,
                m.epe,
                m.px1,
                m.fl_all,
                m.wauc,
                r.config_hash,
                r.changed.join(";")
            );
        }
        s
    }
}

/// Train the base configuration and every arm for every seed; all arms of a
/// seed share that seed's data stream. `progress` is told each run's label.
pub fn ablate<T: Scalar>(spec: &AblationSpec, progress: &mut dyn FnMut(&str)) -> Result<AblationTable> {
    let mut arms = vec![AblationArm {
        name: "base".into(),
        set: toml::Table::new(),
    }];
    arms.extend(spec.arms.iter().cloned());
    let mut rows = Vec::new();
    for seed in spec.seeds() {
        for arm in &arms {
            let (mut cfg, changed) = spec.arm_config(arm)?;
            cfg.seed = seed;
            progress(&format!("{} seed {seed}", arm.name));
            let mut trainer = Trainer::<T>::new(&cfg)?;
            let report = trainer.run(&mut std::io::sink(), None)?;
            rows.push(AblationRow {
                arm: arm.name.clone(),
                seed,
                init: cfg.model.direct_regression,
                blocks: cfg.model.rnn_blocks,
                loss: cfg.loss.kind,
                metrics: *report.final_eval.last(),
                config_hash: trainer.config_hash().to_string(),
                changed,
                history: report.history,
            });
        }
    }
    Ok(AblationTable { rows })
}
