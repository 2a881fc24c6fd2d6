//! Operation counting and energy estimates for the two regimes: FLOPs for
//! the conventional network, synaptic operations (one per spike) for the
//! spiking one.
//!
//! A multiply-accumulate counts as 2 FLOPs. Energies are accumulated in
//! femtojoules so sums over samples are exact for integral constants.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Mode, Model, NetworkGraph};
use crate::layers::Layer;
use crate::snn::SnnRunRecord;
use crate::stdp::PresentationRecord;

const FEMTO: f64 = 1e15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConstants {
    /// Energy per FLOP in femtojoules (12.5 pJ).
    pub flop_fj: f64,
    /// Energy per synaptic operation in femtojoules (77 fJ).
    pub sop_fj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            flop_fj: 12_500.0,
            sop_fj: 77.0,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.flop_fj >= 0.0 && self.flop_fj.is_finite() && self.sop_fj >= 0.0 && self.sop_fj.is_finite()) {
            return Err(Error::Config("energy constants must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub count: u64,
}

/// Per-layer FLOPs of an ANN-mode graph; shape-only, input values never
/// enter the count.
pub fn flop_breakdown(graph: &NetworkGraph) -> Result<Vec<LayerCount>> {
    if graph.mode() != Mode::Ann {
        return Err(Error::InvalidParameter("FLOP counting needs an ANN-mode graph".into()));
    }
    let shapes = graph.shape_trace()?;
    graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let out: u64 = shapes[i + 1].iter().product::<usize>() as u64;
            let count = match layer {
                Layer::Conv2d(c) => {
                    let k = c.kernel as u64;
                    2 * k * k * c.in_channels as u64 * out
                }
                Layer::Linear(l) => 2 * l.in_features as u64 * l.out_features as u64,
                Layer::AvgPool(_) | Layer::MaxPool(_) | Layer::Relu | Layer::Qcfs(_) | Layer::BatchNorm(_) => out,
                Layer::Flatten => 0,
                Layer::If(_) => {
                    return Err(Error::UnsupportedLayer {
                        index: i,
                        kind: layer.kind_name(),
                        reason: "spiking layers have no FLOP count",
                    })
                }
            };
            Ok(LayerCount {
                name: format!("{i}:{}", layer.kind_name()),
                count,
            })
        })
        .collect()
}

pub fn count_flops(graph: &NetworkGraph) -> Result<u64> {
    Ok(flop_breakdown(graph)?.iter().map(|l| l.count).sum())
}

/// FLOPs of backbone plus head.
pub fn model_flops(model: &Model) -> Result<u64> {
    let head = match &model.head {
        Some(h) => count_flops(h)?,
        None => 0,
    };
    Ok(count_flops(&model.backbone)? + head)
}

pub fn count_sops(run: &SnnRunRecord) -> u64 {
    run.total_sops()
}

pub fn count_classifier_sops(run: &PresentationRecord, include_input: bool) -> u64 {
    run.sops(include_input)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Improvement {
    Ratio(f64),
    /// SOPs are zero while FLOPs are not.
    Infinite,
    /// Both regimes cost nothing.
    Undefined,
}

impl fmt::Display for Improvement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Improvement::Ratio(r) => write!(f, "{r:.2}"),
            Improvement::Infinite => f.write_str("inf"),
            Improvement::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub flops: u64,
    pub sops: u64,
    pub e_ann_fj: f64,
    pub e_snn_fj: f64,
    pub flop_breakdown: Vec<LayerCount>,
    pub sop_breakdown: Vec<LayerCount>,
}

impl EnergyReport {
    pub fn new(flops: u64, sops: u64, constants: &EnergyConstants) -> Self {
        Self {
            flops,
            sops,
            e_ann_fj: flops as f64 * constants.flop_fj,
            e_snn_fj: sops as f64 * constants.sop_fj,
            flop_breakdown: Vec::new(),
            sop_breakdown: Vec::new(),
        }
    }

    pub fn e_ann(&self) -> f64 {
        self.e_ann_fj / FEMTO
    }

    pub fn e_snn(&self) -> f64 {
        self.e_snn_fj / FEMTO
    }

    pub fn improvement(&self) -> Improvement {
        if self.e_snn_fj > 0.0 {
            Improvement::Ratio(self.e_ann_fj / self.e_snn_fj)
        } else if self.e_ann_fj > 0.0 {
            Improvement::Infinite
        } else {
            Improvement::Undefined
        }
    }

    /// Field-wise sum; breakdown entries are merged by name.
    pub fn sum<'a, I: IntoIterator<Item = &'a EnergyReport>>(reports: I) -> EnergyReport {
        let mut total = EnergyReport {
            flops: 0,
            sops: 0,
            e_ann_fj: 0.0,
            e_snn_fj: 0.0,
            flop_breakdown: Vec::new(),
            sop_breakdown: Vec::new(),
        };
        for r in reports {
            total.flops += r.flops;
            total.sops += r.sops;
            total.e_ann_fj += r.e_ann_fj;
            total.e_snn_fj += r.e_snn_fj;
            merge(&mut total.flop_breakdown, &r.flop_breakdown);
            merge(&mut total.sop_breakdown, &r.sop_breakdown);
        }
        total
    }
}

fn merge(into: &mut Vec<LayerCount>, from: &[LayerCount]) {
    for l in from {
        match into.iter_mut().find(|e| e.name == l.name) {
            Some(e) => e.count += l.count,
            None => into.push(l.clone()),
        }
    }
}

pub fn energy_report(flops: u64, sops: u64, constants: &EnergyConstants) -> EnergyReport {
    EnergyReport::new(flops, sops, constants)
}

/// One row of the per-backbone energy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub backbone: String,
    pub ann_accuracy: f32,
    pub snn_accuracy: f32,
    pub e_ann: String,
    pub e_snn: String,
    pub improvement: String,
}

impl EnergyRow {
    /// `report` totals over `samples` images; energies are listed per image.
    pub fn new(backbone: &str, ann_accuracy: f32, snn_accuracy: f32, report: &EnergyReport, samples: usize) -> Self {
        let n = samples.max(1) as f64;
        Self {
            backbone: backbone.to_string(),
            ann_accuracy,
            snn_accuracy,
            e_ann: format!("{:.6e}", report.e_ann() / n),
            e_snn: format!("{:.6e}", report.e_snn() / n),
            improvement: report.improvement().to_string(),
        }
    }
}

pub fn write_energy_table<W: Write>(writer: W, rows: &[EnergyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv2d, Linear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_flop_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = NetworkGraph::ann(vec![10], vec![Layer::Linear(Linear::new(10, 5, &mut rng))]).unwrap();
        assert_eq!(count_flops(&lin).unwrap(), 100);
        let conv = NetworkGraph::ann(
            vec![1, 10, 10],
            vec![Layer::Conv2d(Conv2d::new(1, 1, 3, 1, 0, &mut rng))],
        )
        .unwrap();
        assert_eq!(count_flops(&conv).unwrap(), 1152);
        let empty = NetworkGraph::ann(vec![4], vec![]).unwrap();
        assert_eq!(count_flops(&empty).unwrap(), 0);
    }

    #[test]
    fn joule_conversion_is_exact() {
        let c = EnergyConstants::default();
        assert_eq!(energy_report(0, 1_000_000, &c).e_snn(), 7.7e-8);
        assert_eq!(energy_report(1, 0, &c).e_ann(), 12.5e-12);
        let zero = energy_report(0, 0, &c);
        assert_eq!((zero.e_ann(), zero.e_snn()), (0.0, 0.0));
        assert_eq!(zero.improvement(), Improvement::Undefined);
        assert_eq!(energy_report(5, 0, &c).improvement(), Improvement::Infinite);
    }

    #[test]
    fn improvement_format_and_scaling() {
        let c = EnergyConstants::default();
        let r = energy_report(69_531, 50_000, &c);
        assert_eq!(r.improvement(), Improvement::Ratio(225.75));
        assert_eq!(r.improvement().to_string(), "225.75");
        let Improvement::Ratio(double) = energy_report(69_531, 100_000, &c).improvement() else {
            panic!("ratio expected")
        };
        assert_eq!(double, 225.75 / 2.0);
    }

    #[test]
    fn batch_sum_is_exact() {
        let c = EnergyConstants::default();
        let parts: Vec<EnergyReport> = (1..50u64).map(|i| energy_report(i * 977, i * i * 13, &c)).collect();
        let summed = EnergyReport::sum(&parts);
        let whole = energy_report(
            parts.iter().map(|p| p.flops).sum(),
            parts.iter().map(|p| p.sops).sum(),
            &c,
        );
        assert_eq!(summed, whole);
        assert_eq!(summed.e_snn(), whole.e_snn());
    }
}
