//! Cartesian hyperparameter grids over the four training variation axes.

use serde::{Deserialize, Serialize};

use super::densenet::Arch;
use super::optim::OptimizerKind;
use super::train::TrainConfig;
use super::NetError;
use crate::volume::{Encoding, Normalization};

/// Values selected on each axis; every axis needs at least one value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSelection {
    pub arch: Vec<Arch>,
    pub optimizer: Vec<OptimizerKind>,
    pub normalization: Vec<Normalization>,
    pub encoding: Vec<Encoding>,
}

impl GridSelection {
    /// Every value on every axis.
    pub fn full() -> Self {
        Self {
            arch: Arch::ALL.to_vec(),
            optimizer: OptimizerKind::ALL.to_vec(),
            normalization: Normalization::ALL.to_vec(),
            encoding: Encoding::ALL.to_vec(),
        }
    }

    /// Replaces one axis from comma-separated value names, e.g.
    /// `set_axis("optimizer", "ranger21,adamw")`.
    pub fn set_axis(&mut self, axis: &str, values: &str) -> Result<(), NetError> {
        fn parse<T: Copy>(
            all: &[T],
            name: fn(T) -> &'static str,
            values: &str,
        ) -> Result<Vec<T>, NetError> {
            values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(|v| {
                    all.iter().copied().find(|x| name(*x) == v).ok_or_else(|| {
                        let known: Vec<_> = all.iter().map(|x| name(*x)).collect();
                        NetError::InvalidSelection(format!(
                            "unknown value '{v}' (expected one of {})",
                            known.join(", ")
                        ))
                    })
                })
                .collect()
        }
        match axis {
            "arch" => self.arch = parse(&Arch::ALL, Arch::name, values)?,
            "optimizer" => {
                self.optimizer = parse(&OptimizerKind::ALL, OptimizerKind::name, values)?
            }
            "normalization" => {
                self.normalization = parse(&Normalization::ALL, Normalization::name, values)?
            }
            "encoding" => self.encoding = parse(&Encoding::ALL, Encoding::name, values)?,
            other => {
                return Err(NetError::InvalidSelection(format!(
                    "unknown axis '{other}'"
                )))
            }
        }
        Ok(())
    }
}

fn check_axis<T: PartialEq + std::fmt::Debug>(name: &str, values: &[T]) -> Result<(), NetError> {
    if values.is_empty() {
        return Err(NetError::InvalidSelection(format!(
            "axis '{name}' has no values"
        )));
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(NetError::InvalidSelection(format!(
                "axis '{name}' repeats {v:?}"
            )));
        }
    }
    Ok(())
}

/// Cartesian product of the selected values over `base`, ordered by arch,
/// then optimizer, normalization and encoding (last axis varies fastest).
pub fn hyperparameter_grid(
    selection: &GridSelection,
    base: &TrainConfig,
) -> Result<Vec<TrainConfig>, NetError> {
    check_axis("arch", &selection.arch)?;
    check_axis("optimizer", &selection.optimizer)?;
    check_axis("normalization", &selection.normalization)?;
    check_axis("encoding", &selection.encoding)?;
    let mut out = Vec::new();
    for &arch in &selection.arch {
        for &optimizer in &selection.optimizer {
            for &normalization in &selection.normalization {
                for &encoding in &selection.encoding {
                    out.push(TrainConfig {
                        arch,
                        optimizer,
                        normalization,
                        encoding,
                        ..base.clone()
                    });
                }
            }
        }
    }
    Ok(out)
}
