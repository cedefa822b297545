//! Per-batch training objective for every supported method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::classification::{
    cross_distillation, cross_entropy, ilos_loss, old_class_ratio, recorded_probabilities, LossGrad,
};
use crate::losses::importance::{
    ewc_penalty, mas_penalty, ImportanceKind, MasFunctional, ParameterImportance,
};
use crate::losses::lucir::{lucir_dis_batch, lucir_lambda, lucir_mr_batch};
use crate::nn::{Matrix, MlpNetwork, ParamSet, TeacherSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Ce,
    Lwf,
    Ewc,
    Rwc,
    Mas,
    LucirDis,
    LucirMr,
    LucirDisMr,
    Ilos,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Ce,
        Method::Lwf,
        Method::Ewc,
        Method::Rwc,
        Method::Mas,
        Method::LucirDis,
        Method::LucirMr,
        Method::LucirDisMr,
        Method::Ilos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ce => "CE",
            Method::Lwf => "LwF",
            Method::Ewc => "EWC",
            Method::Rwc => "RWC",
            Method::Mas => "MAS",
            Method::LucirDis => "LUCIR-DIS",
            Method::LucirMr => "LUCIR-MR",
            Method::LucirDisMr => "LUCIR-DIS+MR",
            Method::Ilos => "ILOS",
        }
    }

    /// Which importance estimate the method anchors with, if any.
    pub fn importance_kind(self) -> Option<ImportanceKind> {
        match self {
            Method::Ewc | Method::Rwc => Some(ImportanceKind::Fisher),
            Method::Mas => Some(ImportanceKind::Mas),
            _ => None,
        }
    }

    pub fn rotates(self) -> bool {
        self == Method::Rwc
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub method: Method,
    /// Penalty strength for EWC/RWC/MAS; scales the distillation weight for LwF.
    pub lambda: f64,
    pub lambda_base: f64,
    pub margin: f64,
    pub top_k: usize,
    pub beta: f64,
    pub temperature: f64,
    pub mas_functional: MasFunctional,
}

impl LossConfig {
    pub fn new(method: Method) -> Self {
        let lambda = match method {
            Method::Lwf => 1.6,
            Method::Ewc | Method::Rwc => 3.0,
            Method::Mas => 0.25,
            _ => 0.0,
        };
        Self {
            method,
            lambda,
            lambda_base: 5.0,
            margin: 0.5,
            top_k: 2,
            beta: 0.5,
            temperature: 2.0,
            mas_functional: MasFunctional::SquaredL2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_owned()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.lambda_base >= 0.0 && self.lambda_base.is_finite()) {
            return bad("lambda_base must be >= 0");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be >= 0");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be > 0");
        }
        Ok(())
    }
}

/// One minibatch. `targets` index head outputs; `replayed` marks memory samples.
#[derive(Debug, Clone, Copy)]
pub struct TrainingBatch<'a> {
    pub inputs: &'a Matrix,
    pub targets: &'a [usize],
    pub replayed: &'a [bool],
}

/// State carried over from earlier tasks.
#[derive(Debug, Clone, Copy)]
pub struct PreviousTasks<'a> {
    pub teacher: &'a TeacherSnapshot,
    /// Penalty anchor `θ*` and its importance, for EWC/RWC/MAS.
    pub anchor: Option<(&'a ParamSet, &'a ParameterImportance)>,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub grads: ParamSet,
    /// Loss terms other than plain cross-entropy that were evaluated.
    pub extra_terms: usize,
    /// Zero-norm vectors met by the normalized LUCIR terms.
    pub degenerate: usize,
}

/// Loss and parameter gradients of one batch under `config`. Without old
/// classes every method reduces to cross-entropy.
pub fn objective(
    net: &MlpNetwork,
    batch: TrainingBatch<'_>,
    previous: Option<PreviousTasks<'_>>,
    config: &LossConfig,
) -> Result<Objective> {
    let n = batch.inputs.rows();
    if batch.targets.len() != n || batch.replayed.len() != n {
        return Err(Error::shape(
            "objective",
            n,
            format!(
                "{} targets, {} flags",
                batch.targets.len(),
                batch.replayed.len()
            ),
        ));
    }
    let cache = net.forward(batch.inputs)?;
    let logits = cache.logits();
    let previous = previous.filter(|p| p.teacher.class_count() > 0);

    let mut extra_terms = 0;
    let mut degenerate = 0;
    let mut penalty: Option<(f64, ParamSet)> = None;

    let total: LossGrad = match previous {
        None => cross_entropy(logits, batch.targets)?,
        Some(prev) => {
            let n_old = prev.teacher.class_count();
            let n_seen = net.output_dim();
            if n_old > n_seen {
                return Err(Error::shape(
                    "objective",
                    format!("teacher classes <= {n_seen}"),
                    n_old,
                ));
            }
            let lambda_o = old_class_ratio(n_old, n_seen);
            let teacher_logits = || prev.teacher.logits(batch.inputs);
            match config.method {
                Method::Ce => cross_entropy(logits, batch.targets)?,
                Method::Lwf => {
                    extra_terms += 1;
                    let recorded = recorded_probabilities(&teacher_logits()?, config.temperature);
                    cross_distillation(
                        logits,
                        batch.targets,
                        &recorded,
                        config.temperature,
                        config.lambda * lambda_o,
                    )?
                }
                Method::Ewc | Method::Rwc | Method::Mas => {
                    if let Some((anchor, importance)) = prev.anchor {
                        extra_terms += 1;
                        let params = net.params();
                        penalty = Some(match importance.kind() {
                            ImportanceKind::Fisher => {
                                ewc_penalty(&params, anchor, importance, config.lambda)?
                            }
                            ImportanceKind::Mas => {
                                mas_penalty(&params, anchor, importance, config.lambda)?
                            }
                        });
                    }
                    cross_entropy(logits, batch.targets)?
                }
                Method::LucirDis | Method::LucirMr | Method::LucirDisMr => {
                    let mut out = cross_entropy(logits, batch.targets)?;
                    if matches!(config.method, Method::LucirDis | Method::LucirDisMr) {
                        extra_terms += 1;
                        let lambda =
                            lucir_lambda(config.lambda_base, n_seen - n_old, n_old).unwrap_or(0.0);
                        let (dis, d) = lucir_dis_batch(&teacher_logits()?, logits)?;
                        degenerate += d;
                        out.accumulate(&dis, lambda)?;
                    }
                    if matches!(config.method, Method::LucirMr | Method::LucirDisMr) {
                        extra_terms += 1;
                        let (mr, d) = lucir_mr_batch(
                            logits,
                            batch.targets,
                            batch.replayed,
                            n_old,
                            config.top_k,
                            config.margin,
                        )?;
                        degenerate += d;
                        out.accumulate(&mr, 1.0)?;
                    }
                    out
                }
                Method::Ilos => {
                    extra_terms += 1;
                    ilos_loss(
                        logits,
                        batch.targets,
                        &teacher_logits()?,
                        config.beta,
                        config.temperature,
                        lambda_o,
                    )?
                }
            }
        }
    };

    let mut grads = net.backward(&cache, &total.grad)?;
    let mut loss = total.loss;
    if let Some((value, pgrad)) = penalty {
        loss += value;
        grads.add_scaled(&pgrad, 1.0)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            index: 0,
            value: loss,
        });
    }
    Ok(Objective {
        loss,
        grads,
        extra_terms,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!(
            "lucir-dis+mr".parse::<Method>().unwrap(),
            Method::LucirDisMr
        );
        assert!("SI".parse::<Method>().is_err());
    }

    #[test]
    fn defaults_follow_tuned_hyperparameters() {
        assert_eq!(LossConfig::new(Method::Lwf).lambda, 1.6);
        assert_eq!(LossConfig::new(Method::Rwc).lambda, 3.0);
        assert_eq!(LossConfig::new(Method::Mas).lambda, 0.25);
        let lucir = LossConfig::new(Method::LucirDisMr);
        assert_eq!(
            (lucir.lambda_base, lucir.margin, lucir.top_k),
            (5.0, 0.5, 2)
        );
        assert!(LossConfig { beta: 2.0, ..lucir }.validate().is_err());
        assert!(LossConfig { top_k: 0, ..lucir }.validate().is_err());
    }
}
