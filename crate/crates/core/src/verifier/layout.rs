//! Token layout `[L, Ô_tp, O_t, Ô_tf, Â_t, CLS]` and the structured
//! visibility mask over it.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::VerifierError;
use crate::nn::BoolMask;

/// Which token blocks take part in verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Drop the semantic tokens `L`.
    NoUnd,
    /// Drop both predicted-latent blocks.
    NoPred,
    /// Drop the real observation `O_t`.
    NoReal,
    /// Drop the future actions.
    NoAction,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoUnd, Ablation::NoPred, Ablation::NoReal, Ablation::NoAction];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoUnd => "no_und",
            Ablation::NoPred => "no_pred",
            Ablation::NoReal => "no_real",
            Ablation::NoAction => "no_action",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = VerifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| VerifierError::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Future tokens never see `O_t`, so their keys and values can be cached.
    #[default]
    CacheCompatible,
    /// Future tokens also see `O_t`; no caching.
    FullFidelity,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::CacheCompatible => "cache_compatible",
            MaskMode::FullFidelity => "full_fidelity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    Semantic,
    PastLatent,
    Real,
    FutureLatent,
    Action,
    Cls,
}

impl Block {
    pub const ORDER: [Block; 6] = [Block::Semantic, Block::PastLatent, Block::Real, Block::FutureLatent, Block::Action, Block::Cls];

    pub fn tag(self) -> &'static str {
        match self {
            Block::Semantic => "L",
            Block::PastLatent => "Otp",
            Block::Real => "Ot",
            Block::FutureLatent => "Otf",
            Block::Action => "A",
            Block::Cls => "CLS",
        }
    }
}

/// Token counts per block; ablated blocks have zero tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VerifierLayout {
    pub k: usize,
    pub r: usize,
    pub n_l: usize,
    pub n_p: usize,
    pub n_real: usize,
    pub n_f: usize,
    pub n_a: usize,
}

impl VerifierLayout {
    pub fn new(n_l: usize, k: usize, r: usize, ablation: Ablation) -> Result<Self, VerifierError> {
        if r == 0 || k == 0 || !k.is_multiple_of(r) {
            return Err(VerifierError::Config(format!("check horizon k={k} must be a positive multiple of r={r}")));
        }
        let n_lat = k / r;
        let mut layout = Self { k, r, n_l, n_p: n_lat, n_real: 1, n_f: n_lat, n_a: k };
        match ablation {
            Ablation::Full => {}
            Ablation::NoUnd => layout.n_l = 0,
            Ablation::NoPred => {
                layout.n_p = 0;
                layout.n_f = 0;
            }
            Ablation::NoReal => layout.n_real = 0,
            Ablation::NoAction => layout.n_a = 0,
        }
        Ok(layout)
    }

    pub fn count(&self, b: Block) -> usize {
        match b {
            Block::Semantic => self.n_l,
            Block::PastLatent => self.n_p,
            Block::Real => self.n_real,
            Block::FutureLatent => self.n_f,
            Block::Action => self.n_a,
            Block::Cls => 1,
        }
    }

    pub fn start(&self, b: Block) -> usize {
        Block::ORDER.iter().take_while(|&&x| x != b).map(|&x| self.count(x)).sum()
    }

    pub fn range(&self, b: Block) -> std::ops::Range<usize> {
        let s = self.start(b);
        s..s + self.count(b)
    }

    pub fn len(&self) -> usize {
        Block::ORDER.iter().map(|&b| self.count(b)).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cls(&self) -> usize {
        self.len() - 1
    }

    pub fn real(&self) -> Option<usize> {
        (self.n_real > 0).then(|| self.start(Block::Real))
    }

    pub fn block_of(&self, i: usize) -> Block {
        for b in Block::ORDER {
            if self.range(b).contains(&i) {
                return b;
            }
        }
        panic!("token {i} outside layout of {} tokens", self.len())
    }

    /// Time of token `i` relative to the check point: past latent `p` sits at
    /// `-(n_p-1-p)·r`, `O_t` at 0, future latent `j` (1-based) at `j·r`,
    /// action `i` (1-based) at `i`. Semantic tokens and CLS have no time.
    pub fn time(&self, i: usize) -> Option<i64> {
        let r = self.r as i64;
        match self.block_of(i) {
            Block::Semantic | Block::Cls => None,
            Block::PastLatent => Some(-((self.n_p - 1 - (i - self.start(Block::PastLatent))) as i64) * r),
            Block::Real => Some(0),
            Block::FutureLatent => Some((i - self.start(Block::FutureLatent) + 1) as i64 * r),
            Block::Action => Some((i - self.start(Block::Action) + 1) as i64),
        }
    }

    /// Rows kept in the KV cache: everything except `O_t` and CLS.
    pub fn cached_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !matches!(self.block_of(i), Block::Real | Block::Cls)).collect()
    }
}

/// A built visibility mask together with the parameters that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FfdcMask {
    pub layout: VerifierLayout,
    pub window: usize,
    pub mode: MaskMode,
    pub bits: BoolMask,
}

/// Build the visibility matrix for `layout` with local window `w`.
pub fn build_mask(layout: &VerifierLayout, w: usize, mode: MaskMode) -> Result<FfdcMask, VerifierError> {
    if w < layout.r {
        return Err(VerifierError::Config(format!("window w={w} is smaller than ratio r={}", layout.r)));
    }
    let n = layout.len();
    let mut m = BoolMask::new(n);
    let prefix = |j: usize| matches!(layout.block_of(j), Block::Semantic | Block::PastLatent);
    for i in 0..n {
        let bi = layout.block_of(i);
        for j in 0..n {
            let bj = layout.block_of(j);
            let visible = match bi {
                Block::Semantic | Block::PastLatent => prefix(j),
                Block::Real => prefix(j) || i == j,
                Block::FutureLatent | Block::Action => {
                    let ti = layout.time(i).expect("future tokens are timed");
                    match bj {
                        Block::Semantic | Block::PastLatent => true,
                        Block::Real => mode == MaskMode::FullFidelity,
                        Block::Cls => false,
                        Block::FutureLatent | Block::Action => {
                            let tj = layout.time(j).expect("future tokens are timed");
                            // Latent j sees latents j' <= j and actions i <= j·r; action i
                            // sees latents with j·r <= i and actions i' <= i.
                            tj <= ti && (ti - tj) as usize <= w
                        }
                    }
                }
                Block::Cls => true,
            };
            m.set(i, j, visible);
        }
    }
    m.validate().map_err(|e| VerifierError::Config(format!("mask construction: {e}")))?;
    Ok(FfdcMask { layout: *layout, window: w, mode, bits: m })
}

impl FfdcMask {
    /// Plain-text dump: a header naming block boundaries, then one row of
    /// `0`/`1` per query token.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let l = &self.layout;
        let _ = writeln!(s, "# ffdc-mask n={} k={} r={} w={} mode={}", l.len(), l.k, l.r, self.window, self.mode.name());
        let blocks: Vec<String> = Block::ORDER
            .iter()
            .map(|&b| {
                let r = l.range(b);
                format!("{}={}..{}", b.tag(), r.start, r.end)
            })
            .collect();
        let _ = writeln!(s, "# blocks {}", blocks.join(" "));
        for i in 0..l.len() {
            let row: String = self.bits.row(i).iter().map(|&b| if b { '1' } else { '0' }).collect();
            let _ = writeln!(s, "{row}");
        }
        s
    }
}

/// Parse the bit rows of a mask dump, ignoring `#` header lines.
pub fn parse_mask_dump(text: &str) -> Result<BoolMask, VerifierError> {
    let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
    let n = rows.len();
    let mut m = BoolMask::new(n);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(VerifierError::Config(format!("mask dump row {i} has {} columns, expected {n}", row.len())));
        }
        for (j, c) in row.chars().enumerate() {
            match c {
                '0' => {}
                '1' => m.set(i, j, true),
                _ => return Err(VerifierError::Config(format!("bad mask character `{c}`"))),
            }
        }
    }
    Ok(m)
}
