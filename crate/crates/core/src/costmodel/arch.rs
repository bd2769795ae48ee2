use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalisation layer flavour. Layer norms carry a scale and a bias, RMS
/// norms only a scale.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    LayerNorm,
    RmsNorm,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_layer_norm(n: &NormKind) -> bool {
    *n == NormKind::LayerNorm
}

/// Structural description of a decoder-only transformer.
///
/// The eight core fields describe a GPT-NeoX style block (fused or split
/// QKV projection with biases, two layer norms, a two-layer MLP). The
/// optional fields cover the Gemma-style variations (multi-query attention,
/// gated MLP, RMS norm, no biases) and GPT-2 style learned positions; they
/// default to the GPT-NeoX shape when absent from a JSON descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_kv_heads: Option<usize>,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub bias: bool,
    #[serde(default, skip_serializing_if = "is_layer_norm")]
    pub norm: NormKind,
    #[serde(default, skip_serializing_if = "is_false")]
    pub gated_ffn: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub fused_qkv: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub learned_positions: bool,
}

impl ModelArch {
    /// A plain GPT-NeoX style descriptor with split Q/K/V projections.
    pub fn new(
        name: impl Into<String>,
        n_layers: usize,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
        vocab_size: usize,
    ) -> Self {
        ModelArch {
            name: name.into(),
            n_layers,
            d_model,
            d_ff,
            n_heads,
            vocab_size,
            max_seq_len: 2048,
            tie_embeddings: false,
            n_kv_heads: None,
            bias: true,
            norm: NormKind::LayerNorm,
            gated_ffn: false,
            fused_qkv: false,
            learned_positions: false,
        }
    }

    pub fn tied(mut self, tie: bool) -> Self {
        self.tie_embeddings = tie;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::arch(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::arch(
                "n_heads",
                format!("must divide d_model ({} % {} != 0)", self.d_model, self.n_heads),
            ));
        }
        if let Some(kv) = self.n_kv_heads {
            if kv == 0 || !self.n_heads.is_multiple_of(kv) {
                return Err(Error::arch(
                    "n_kv_heads",
                    format!("must be a positive divisor of n_heads ({})", self.n_heads),
                ));
            }
        }
        if self.learned_positions && self.max_seq_len == 0 {
            return Err(Error::arch(
                "max_seq_len",
                "must be at least 1 with learned positions",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads.unwrap_or(self.n_heads) * self.head_dim()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let arch: ModelArch = serde_json::from_str(s)?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// What a tensor does inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    TokenEmbedding,
    PositionEmbedding,
    OutputHead,
    AttnNorm,
    FfnNorm,
    FinalNorm,
    Query,
    Key,
    Value,
    QueryKeyValue,
    AttnOut,
    FfnGate,
    FfnUp,
    FfnDown,
}

impl TensorRole {
    /// Dense projections inside a block: the layers LoRA can attach to.
    pub const DENSE: [TensorRole; 8] = [
        TensorRole::Query,
        TensorRole::Key,
        TensorRole::Value,
        TensorRole::QueryKeyValue,
        TensorRole::AttnOut,
        TensorRole::FfnGate,
        TensorRole::FfnUp,
        TensorRole::FfnDown,
    ];

    pub fn is_dense(self) -> bool {
        Self::DENSE.contains(&self)
    }

    pub fn is_embedding(self) -> bool {
        matches!(
            self,
            TensorRole::TokenEmbedding | TensorRole::PositionEmbedding | TensorRole::OutputHead
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorRole::TokenEmbedding => "token_embedding",
            TensorRole::PositionEmbedding => "position_embedding",
            TensorRole::OutputHead => "output_head",
            TensorRole::AttnNorm => "attn_norm",
            TensorRole::FfnNorm => "ffn_norm",
            TensorRole::FinalNorm => "final_norm",
            TensorRole::Query => "query",
            TensorRole::Key => "key",
            TensorRole::Value => "value",
            TensorRole::QueryKeyValue => "query_key_value",
            TensorRole::AttnOut => "attn_out",
            TensorRole::FfnGate => "ffn_gate",
            TensorRole::FfnUp => "ffn_up",
            TensorRole::FfnDown => "ffn_down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let all = [
            TensorRole::TokenEmbedding,
            TensorRole::PositionEmbedding,
            TensorRole::OutputHead,
            TensorRole::AttnNorm,
            TensorRole::FfnNorm,
            TensorRole::FinalNorm,
        ];
        all.into_iter()
            .chain(Self::DENSE)
            .find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Bias,
    /// Multiplicative gain of a normalisation layer.
    Scale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub role: TensorRole,
    pub kind: TensorKind,
    /// Transformer block index, `None` for tensors outside the blocks.
    pub block: Option<usize>,
    /// Dense weights are stored as `[d_in, d_out]`.
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn count(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn is_embedding(&self) -> bool {
        self.role.is_embedding()
    }

    /// `(d_in, d_out)` for dense projection weights.
    pub fn dense_dims(&self) -> Option<(usize, usize)> {
        (self.kind == TensorKind::Weight && self.role.is_dense())
            .then(|| (self.shape[0], self.shape[1]))
    }
}

fn norm_entries(arch: &ModelArch, role: TensorRole, block: Option<usize>, out: &mut Vec<TensorEntry>) {
    let d = arch.d_model;
    out.push(TensorEntry {
        role,
        kind: TensorKind::Scale,
        block,
        shape: vec![d],
    });
    if arch.norm == NormKind::LayerNorm {
        out.push(TensorEntry {
            role,
            kind: TensorKind::Bias,
            block,
            shape: vec![d],
        });
    }
}

fn dense_entries(
    arch: &ModelArch,
    role: TensorRole,
    block: usize,
    d_in: usize,
    d_out: usize,
    out: &mut Vec<TensorEntry>,
) {
    out.push(TensorEntry {
        role,
        kind: TensorKind::Weight,
        block: Some(block),
        shape: vec![d_in, d_out],
    });
    if arch.bias {
        out.push(TensorEntry {
            role,
            kind: TensorKind::Bias,
            block: Some(block),
            shape: vec![d_out],
        });
    }
}

/// Enumerates every parameter tensor of `arch`. Assumes `arch` is valid.
pub(crate) fn enumerate_tensors(arch: &ModelArch) -> Vec<TensorEntry> {
    let d = arch.d_model;
    let q_dim = arch.n_heads * arch.head_dim();
    let kv = arch.kv_dim();
    let mut out = Vec::with_capacity(arch.n_layers * 16 + 6);

    out.push(TensorEntry {
        role: TensorRole::TokenEmbedding,
        kind: TensorKind::Weight,
        block: None,
        shape: vec![arch.vocab_size, d],
    });
    if arch.learned_positions {
        out.push(TensorEntry {
            role: TensorRole::PositionEmbedding,
            kind: TensorKind::Weight,
            block: None,
            shape: vec![arch.max_seq_len, d],
        });
    }

    for b in 0..arch.n_layers {
        norm_entries(arch, TensorRole::AttnNorm, Some(b), &mut out);
        if arch.fused_qkv {
            dense_entries(arch, TensorRole::QueryKeyValue, b, d, q_dim + 2 * kv, &mut out);
        } else {
            dense_entries(arch, TensorRole::Query, b, d, q_dim, &mut out);
            dense_entries(arch, TensorRole::Key, b, d, kv, &mut out);
            dense_entries(arch, TensorRole::Value, b, d, kv, &mut out);
        }
        dense_entries(arch, TensorRole::AttnOut, b, q_dim, d, &mut out);
        norm_entries(arch, TensorRole::FfnNorm, Some(b), &mut out);
        if arch.gated_ffn {
            dense_entries(arch, TensorRole::FfnGate, b, d, arch.d_ff, &mut out);
        }
        dense_entries(arch, TensorRole::FfnUp, b, d, arch.d_ff, &mut out);
        dense_entries(arch, TensorRole::FfnDown, b, arch.d_ff, d, &mut out);
    }

    norm_entries(arch, TensorRole::FinalNorm, None, &mut out);

    if !arch.tie_embeddings {
        out.push(TensorEntry {
            role: TensorRole::OutputHead,
            kind: TensorKind::Weight,
            block: None,
            shape: vec![d, arch.vocab_size],
        });
    }
    out
}
