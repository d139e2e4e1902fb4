use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;

/// Coordinate-wise `Σ (m_k/m)·params_k`, summed in the given order. Callers
/// pass updates sorted by client id.
pub fn aggregate(updates: &[(&ParamSet, f64)]) -> Result<ParamSet> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::invalid("nothing to aggregate"));
    };
    let total: f64 = updates.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("aggregation weights must have a positive sum"));
    }
    let mut out = first.zeros_like();
    for (p, w) in updates {
        out.axpy(w / total, p)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ServerOpt {
    /// The global model is replaced by the aggregate.
    Plain,
    Yogi {
        eta: f64,
        beta1: f64,
        beta2: f64,
        tau: f64,
        v0: f64,
    },
}

impl ServerOpt {
    pub fn yogi_default() -> Self {
        ServerOpt::Yogi {
            eta: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            tau: 0.001,
            v0: 1e-6,
        }
    }
}

/// First and second moment estimates of the Yogi server optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct YogiState {
    pub m: ParamSet,
    pub v: ParamSet,
}

/// Applies the server optimizer to the trainable entries; other entries
/// (batch-norm running statistics) take the aggregate directly.
///
/// Yogi: `Δ = agg − global`, `m ← β₁m + (1−β₁)Δ`,
/// `v ← v − (1−β₂)·Δ²·sign(v − Δ²)`, `global ← global + η·m/(√v + τ)`.
pub fn server_update(
    opt: &ServerOpt,
    global: &mut ParamSet,
    aggregated: &ParamSet,
    yogi: &mut Option<YogiState>,
) -> Result<()> {
    if !aggregated.is_finite() {
        return Err(Error::NonFinite("aggregated update".into()));
    }
    match *opt {
        ServerOpt::Plain => {
            if !global.same_layout(aggregated) {
                return Err(Error::shape("aggregate layout differs from the global model"));
            }
            *global = aggregated.clone();
        }
        ServerOpt::Yogi {
            eta,
            beta1,
            beta2,
            tau,
            v0,
        } => {
            let delta = aggregated.sub(global)?;
            let state = yogi.get_or_insert_with(|| {
                let mut v = global.zeros_like();
                for p in v.iter_mut() {
                    p.value.data_mut().iter_mut().for_each(|x| *x = v0);
                }
                YogiState {
                    m: global.zeros_like(),
                    v,
                }
            });
            for i in 0..global.len() {
                if !global.get(i).kind.is_trainable() {
                    *global.value_mut(i) = aggregated.value(i).clone();
                    continue;
                }
                let d = delta.value(i).data();
                let m = state.m.value_mut(i).data_mut();
                for (mj, dj) in m.iter_mut().zip(d) {
                    *mj = beta1 * *mj + (1.0 - beta1) * dj;
                }
                let v = state.v.value_mut(i).data_mut();
                for (vj, dj) in v.iter_mut().zip(d) {
                    let d2 = dj * dj;
                    *vj -= (1.0 - beta2) * d2 * sign(*vj - d2);
                }
                let (m, v) = (state.m.value(i).data(), state.v.value(i).data());
                let g = global.value_mut(i).data_mut();
                for ((gj, mj), vj) in g.iter_mut().zip(m).zip(v) {
                    *gj += eta * mj / (vj.max(0.0).sqrt() + tau);
                }
            }
            if !global.is_finite() {
                return Err(Error::NonFinite("server update".into()));
            }
        }
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
