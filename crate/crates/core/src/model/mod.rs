//! The multi-loop refinement network.
//!
//! Each iteration re-weights node features with one small convolutional
//! attention stack per loop, encodes the graph twice (once to predict the
//! next residue, once more after that residue is known to predict
//! coordinates for every residue), and rebuilds the graph from the new
//! coordinates.

mod attention;
mod mpn;
mod refine;

pub use attention::{fuse_masks, loop_attention};
pub use mpn::{argmax, mpn_encode, predict_coords, predict_residue, UNKNOWN_RESIDUE};
pub use refine::{initial_backbone, RefinementState, StepOutput, Trace, CA_SPACING};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NUM_AMINO_ACIDS;
use crate::error::{Error, Result};
use crate::graph::{DEFAULT_K, EDGE_DIM, NODE_DIM};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// How attention masks enter the node features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `V'_k = m_k ⊙ V_k`.
    Weighted,
    /// `V'_k = m_k`: the masks replace the features outright.
    Replace,
    /// No attention; `V' = V`.
    Disabled,
}

impl FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "replace" => Ok(Self::Replace),
            "disabled" | "none" => Ok(Self::Disabled),
            other => Err(Error::Config(format!("unknown attention mode '{other}'"))),
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Weighted => "weighted",
            Self::Replace => "replace",
            Self::Disabled => "disabled",
        })
    }
}

/// Whether residue identities fed back into the state come from the
/// ground truth or from the model's own argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TeacherForced,
    Generative,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forced" | "teacher-forced" => Ok(Self::TeacherForced),
            "generative" => Ok(Self::Generative),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TeacherForced => "teacher_forced",
            Self::Generative => "generative",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Attention kernel size.
    pub z: usize,
    /// Convolution stages per loop.
    pub q: usize,
    pub mpn_layers: usize,
    pub hidden: usize,
    pub k_neighbors: usize,
    pub attention: AttentionMode,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            z: 2,
            q: 2,
            mpn_layers: 4,
            hidden: 256,
            k_neighbors: DEFAULT_K,
            attention: AttentionMode::Weighted,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Two message-passing layers of width 64.
    pub fn desk_scale() -> Self {
        Self {
            mpn_layers: 2,
            hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.z) {
            return Err(Error::Config(format!("z = {} outside [1, 6]", self.z)));
        }
        if !(2..=10).contains(&self.q) {
            return Err(Error::Config(format!("q = {} outside [2, 10]", self.q)));
        }
        if self.mpn_layers == 0 || self.hidden == 0 || self.k_neighbors == 0 {
            return Err(Error::Config(
                "mpn_layers, hidden and k_neighbors must be ≥ 1".into(),
            ));
        }
        if self.bn_eps <= 0.0 {
            return Err(Error::Config("bn_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct StageIds {
    pub kernel: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub w_msg: ParamId,
    pub b_msg: ParamId,
    pub w_upd: ParamId,
    pub b_upd: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct MpnIds {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub embed: ParamId,
    pub layers: Vec<LayerIds>,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadIds {
    pub w_a: ParamId,
    /// Coordinate heads in `N, CA, C` order.
    pub w_x: [ParamId; 3],
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIds {
    pub attention: [Vec<StageIds>; 3],
    pub seq_mpn: MpnIds,
    pub struct_mpn: MpnIds,
    pub heads: HeadIds,
}

/// Model configuration together with its trainable tensors.
#[derive(Debug, Clone)]
pub struct Mlsa {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) ids: ParamIds,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

impl Mlsa {
    /// Fresh parameters drawn from a seeded Glorot-uniform initializer.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (z, h) = (config.z, config.hidden);

        let attention = ["h1", "h2", "h3"].map(|lp| {
            (0..config.q)
                .map(|s| StageIds {
                    kernel: store.add(
                        format!("att.{lp}.stage{s}.kernel"),
                        glorot(&mut rng, &[1, 1, z, z], z * z, z * z),
                    ),
                    gamma: store.add(format!("att.{lp}.stage{s}.gamma"), Tensor::full(&[1], 1.0)),
                    beta: store.add(format!("att.{lp}.stage{s}.beta"), Tensor::zeros(&[1])),
                })
                .collect()
        });

        let mut mpn = |name: &str, store: &mut ParamStore| MpnIds {
            w_in: store.add(
                format!("{name}.w_in"),
                glorot(&mut rng, &[NODE_DIM, h], NODE_DIM, h),
            ),
            b_in: store.add(format!("{name}.b_in"), Tensor::zeros(&[h])),
            embed: store.add(
                format!("{name}.embed"),
                glorot(&mut rng, &[NUM_AMINO_ACIDS + 1, h], NUM_AMINO_ACIDS + 1, h),
            ),
            layers: (0..config.mpn_layers)
                .map(|l| LayerIds {
                    w_msg: store.add(
                        format!("{name}.layer{l}.w_msg"),
                        glorot(&mut rng, &[h + EDGE_DIM, h], h + EDGE_DIM, h),
                    ),
                    b_msg: store.add(format!("{name}.layer{l}.b_msg"), Tensor::zeros(&[h])),
                    w_upd: store.add(
                        format!("{name}.layer{l}.w_upd"),
                        glorot(&mut rng, &[2 * h, h], 2 * h, h),
                    ),
                    b_upd: store.add(format!("{name}.layer{l}.b_upd"), Tensor::zeros(&[h])),
                })
                .collect(),
        };
        let seq_mpn = mpn("mpn_seq", &mut store);
        let struct_mpn = mpn("mpn_struct", &mut store);

        let heads = HeadIds {
            w_a: store.add(
                "head.w_a",
                glorot(&mut rng, &[h, NUM_AMINO_ACIDS], h, NUM_AMINO_ACIDS),
            ),
            w_x: ["n", "ca", "c"]
                .map(|atom| store.add(format!("head.w_x.{atom}"), glorot(&mut rng, &[h, 3], h, 3))),
        };

        Ok(Self {
            config,
            params: store,
            ids: ParamIds {
                attention,
                seq_mpn,
                struct_mpn,
                heads,
            },
        })
    }

    /// Replaces parameter values by name. Every parameter must be present
    /// with a matching shape.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        let mut staged = self.params.clone();
        for (name, slot) in staged.iter_mut() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
            slot.zero_grad();
        }
        self.params = staged;
        Ok(())
    }

    /// Leaves for every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.bind(tape)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }
}
