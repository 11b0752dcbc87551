//! Configuration sweeps. Every study varies one aspect of a base
//! configuration, trains each variant over the configured seeds and reports
//! mean base, novel and harmonic-mean accuracy per variant.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{GammaMode, WaDistance};
use crate::metrics::{evaluate_base_novel, EvalReport};
use crate::noise::PerturbationKind;
use crate::seed;
use crate::train::{train, RunContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Components,
    TokenLength,
    AlphaWeight,
    WaDistance,
    ThetaSweep,
    GammaMode,
    NoiseKind,
    InjectionLayers,
}

impl Study {
    pub const ALL: [Study; 8] = [
        Study::Components,
        Study::TokenLength,
        Study::AlphaWeight,
        Study::WaDistance,
        Study::ThetaSweep,
        Study::GammaMode,
        Study::NoiseKind,
        Study::InjectionLayers,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::Components => "components",
            Study::TokenLength => "token_length",
            Study::AlphaWeight => "alpha_weight",
            Study::WaDistance => "wa_distance",
            Study::ThetaSweep => "theta_sweep",
            Study::GammaMode => "gamma_mode",
            Study::NoiseKind => "noise_kind",
            Study::InjectionLayers => "injection_layers",
        }
    }

    /// Labelled configurations of the sweep, in table order.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label, c)
        };
        match self {
            Study::Components => (0..8u8)
                .map(|bits| {
                    // order: none, singles, pairs, all
                    let mask = [0b000, 0b001, 0b010, 0b100, 0b011, 0b101, 0b110, 0b111][bits as usize];
                    let (tn, wa, ap) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
                    let mut parts = Vec::new();
                    if tn {
                        parts.push("text_noise");
                    }
                    if wa {
                        parts.push("wa_loss");
                    }
                    if ap {
                        parts.push("anti_prompt");
                    }
                    let label = if parts.is_empty() { "baseline".to_string() } else { parts.join("+") };
                    with(label, &|c| {
                        c.components.text_noise = tn;
                        c.components.wa_loss = wa;
                        c.components.anti_prompt = ap;
                    })
                })
                .collect(),
            Study::TokenLength => (1..=6)
                .map(|t| with(format!("T={t}"), &|c| c.set_prompt_count(t)))
                .collect(),
            Study::AlphaWeight => [0.001, 0.01, 0.1, 1.0]
                .into_iter()
                .map(|a| with(format!("alpha={a}"), &|c| c.weak_noise.alpha = a))
                .collect(),
            Study::WaDistance => [WaDistance::L1, WaDistance::Mse, WaDistance::Cosine, WaDistance::Kl]
                .into_iter()
                .map(|d| with(d.name().to_string(), &|c| c.losses.wa_distance = d))
                .collect(),
            Study::ThetaSweep => (1..=10)
                .map(|i| {
                    let theta = i as f64 / 10.0;
                    with(format!("theta={theta:.1}"), &|c| c.losses.theta = theta)
                })
                .collect(),
            Study::GammaMode => [
                GammaMode::Log,
                GammaMode::Mean,
                GammaMode::SoftmaxEntropy,
                GammaMode::VarianceAdaptive,
            ]
            .into_iter()
            .map(|m| with(m.name().to_string(), &|c| c.losses.gamma_mode = m))
            .collect(),
            Study::NoiseKind => [
                PerturbationKind::SynonymReplace,
                PerturbationKind::Mask,
                PerturbationKind::Shuffle,
                PerturbationKind::Drop,
                PerturbationKind::WeakFusion,
            ]
            .into_iter()
            .map(|k| {
                with(k.name().to_string(), &|c| {
                    c.training_noise.kind = k;
                    c.training_noise.rate = 0.25;
                })
            })
            .collect(),
            Study::InjectionLayers => {
                let last = base.encoder.num_layers;
                let mut ranges = vec![(1, 3), (1, 6), (1, 9), (1, 12), (3, 6), (3, 9), (3, 12), (6, 9), (6, 12), (9, 12)];
                ranges.retain(|&(_, e)| e <= last);
                ranges
                    .into_iter()
                    .map(|(s, e)| {
                        with(format!("{{{s}-{e}}}"), &|c| {
                            c.injection.layer_start = s;
                            c.injection.layer_end = e;
                        })
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Study::ALL.iter().map(|s| s.name()).collect();
                Error::Input(format!("unknown study `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Mean accuracies of one variant over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub study: Study,
    pub label: String,
    pub base: f64,
    pub novel: f64,
    /// Mean of the per-seed harmonic means.
    pub hm: f64,
    pub n_seeds: usize,
}

impl AblationRow {
    pub fn from_reports(study: Study, label: String, reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Input("no seeds to aggregate".into()));
        }
        let n = reports.len() as f64;
        Ok(Self {
            study,
            label,
            base: reports.iter().map(|r| r.base_acc).sum::<f64>() / n,
            novel: reports.iter().map(|r| r.novel_acc).sum::<f64>() / n,
            hm: reports.iter().map(|r| r.hm).sum::<f64>() / n,
            n_seeds: reports.len(),
        })
    }
}

/// Trains and evaluates every seed of `ctx.config`, in parallel unless
/// deterministic mode is on. Results come back in seed order either way.
pub fn evaluate_seeds(ctx: &RunContext) -> Result<Vec<EvalReport>> {
    let one = |&s: &u64| -> Result<EvalReport> {
        let result = train(ctx, s, |_| Ok(()))?;
        evaluate_base_novel(ctx, &result.model, s)
    };
    if seed::parallel_enabled() {
        ctx.config.seeds.par_iter().map(one).collect()
    } else {
        ctx.config.seeds.iter().map(one).collect()
    }
}

/// Runs every variant of `study` over the seeds of `ctx.config`.
/// `on_row` sees each row as soon as it is finished.
pub fn run_ablation(
    ctx: &RunContext,
    study: Study,
    mut on_row: impl FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, config) in study.variants(&ctx.config) {
        let variant = ctx.derive(config)?;
        log::info!("{study}: {label}");
        let reports = evaluate_seeds(&variant)?;
        let row = AblationRow::from_reports(study, label, &reports)?;
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("study,label,base,novel,hm,n_seeds\n");
    for r in rows {
        s.push_str(&format!(
            "{},\"{}\",{:.4},{:.4},{:.4},{}\n",
            r.study, r.label, r.base, r.novel, r.hm, r.n_seeds
        ));
    }
    s
}

pub fn to_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | Base | Novel | HM |\n|---|---:|---:|---:|\n");
    for r in rows {
        s.push_str(&format!("| {} | {:.2} | {:.2} | {:.2} |\n", r.label, r.base, r.novel, r.hm));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_names_round_trip() {
        for s in Study::ALL {
            assert_eq!(s.name().parse::<Study>().unwrap(), s);
        }
        assert!("nonsense".parse::<Study>().is_err());
    }

    #[test]
    fn sweep_shapes() {
        let base = RunConfig::default();
        let rows = |s: Study| s.variants(&base).len();
        assert_eq!(rows(Study::Components), 8);
        assert_eq!(rows(Study::TokenLength), 6);
        assert_eq!(rows(Study::AlphaWeight), 4);
        assert_eq!(rows(Study::WaDistance), 4);
        assert_eq!(rows(Study::ThetaSweep), 10);
        assert_eq!(rows(Study::GammaMode), 4);
        assert_eq!(rows(Study::NoiseKind), 5);
        assert_eq!(rows(Study::InjectionLayers), 10);
        for s in Study::ALL {
            for (label, c) in s.variants(&base) {
                c.validate().unwrap_or_else(|e| panic!("{s} {label}: {e}"));
            }
        }
    }

    #[test]
    fn component_grid_is_complete() {
        let v = Study::Components.variants(&RunConfig::default());
        let mut seen: Vec<(bool, bool, bool)> = v
            .iter()
            .map(|(_, c)| (c.components.text_noise, c.components.wa_loss, c.components.anti_prompt))
            .collect();
        assert_eq!(v[0].0, "baseline");
        assert_eq!(v[7].0, "text_noise+wa_loss+anti_prompt");
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn theta_rows_cover_the_unit_interval() {
        let thetas: Vec<f64> = Study::ThetaSweep
            .variants(&RunConfig::default())
            .iter()
            .map(|(_, c)| c.losses.theta)
            .collect();
        assert_eq!(thetas.first(), Some(&0.1));
        assert_eq!(thetas.last(), Some(&1.0));
    }

    #[test]
    fn row_means() {
        let r = |b, n| EvalReport {
            seed: 0,
            base_acc: b,
            novel_acc: n,
            hm: crate::metrics::harmonic_mean_or_zero(b, n),
            n_base: 1,
            n_novel: 1,
        };
        let row = AblationRow::from_reports(Study::Components, "x".into(), &[r(50.0, 50.0), r(100.0, 0.0)]).unwrap();
        assert_eq!(row.base, 75.0);
        assert_eq!(row.novel, 25.0);
        assert_eq!(row.hm, 25.0);
        assert_eq!(row.n_seeds, 2);
    }
}
