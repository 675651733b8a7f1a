//! Token-granular dual-key attention memory.
//!
//! Every token carries a latent key, a unit direction key shared by all tokens
//! written from the same view, a value vector and usage bookkeeping. Reads
//! attend over the whole bank twice: once favouring tokens whose direction
//! agrees with the query direction, once favouring tokens facing away from it.
//! When a write would overflow the capacity, the bank drops a fixed fraction of
//! its tokens, chosen among the directionally redundant ones by low usage.

mod snapshot;

pub use snapshot::{read_snapshot, restore, snapshot, write_snapshot};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Vec3;

/// Query directions closer than this to cancelling out fall back to the reference direction.
pub const ANTIPODAL_EPS: f64 = 1e-6;
/// Fraction of the bank removed by one sparsification pass.
pub const PRUNE_FRACTION: f64 = 0.2;
/// Fraction of the bank (by coverage) eligible for pruning.
pub const DENSE_FRACTION: f64 = 0.5;
/// Usage percentile inside the dense subset below which tokens are pruned.
pub const USAGE_PERCENTILE: f64 = 40.0;

/// Row-major block of `rows × cols` features (one row per token).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenBlock {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::arg(format!("block {rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::arg("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn max_abs_diff(&self, other: &TokenBlock) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Unit direction from azimuth `theta` and polar angle `phi` (radians).
pub fn direction_key_from_angles(theta: f64, phi: f64) -> Result<Vec3> {
    if !theta.is_finite() || !phi.is_finite() {
        return Err(Error::arg("direction angles must be finite"));
    }
    Ok(Vec3::new(phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos()))
}

fn check_unit(v: &Vec3, what: &str) -> Result<()> {
    let n = v.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
        return Err(Error::arg(format!("{what} must be a unit vector (norm {n})")));
    }
    Ok(())
}

/// Bisector of the reference and current directions. Antipodal inputs return `k0`.
pub fn direction_query(k0: &Vec3, kt: &Vec3) -> Result<Vec3> {
    check_unit(k0, "reference direction")?;
    check_unit(kt, "current direction")?;
    let sum = k0 + kt;
    let n = sum.norm();
    if n < ANTIPODAL_EPS {
        return Ok(*k0);
    }
    Ok(sum / n)
}

/// Attention temperature for an orientation confidence; lower confidence flattens attention.
pub fn temperature(sigma: f64) -> f64 {
    let clamped = if sigma.is_nan() { 0.0 } else { sigma.clamp(0.0, 1.0) };
    if clamped != sigma {
        log::warn!("orientation confidence {sigma} clamped to {clamped}");
    }
    2.5 - clamped
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Feature width C of latent keys and values.
    pub feature_dim: usize,
    /// Tokens written per view (P).
    pub tokens_per_view: usize,
    /// Hard cap on stored tokens (S·P).
    pub capacity_tokens: usize,
    /// When false, the directional factor of both scores is replaced by 1.
    pub directional: bool,
}

impl MemoryConfig {
    /// Desk-scale defaults: C = P = 64, twenty views of capacity.
    pub fn desk() -> Self {
        Self {
            feature_dim: 64,
            tokens_per_view: 64,
            capacity_tokens: 64 * 20,
            directional: true,
        }
    }

    /// Full-scale constants: C = P = 1024, S·P = 1024 × 20.
    pub fn full_scale() -> Self {
        Self {
            feature_dim: 1024,
            tokens_per_view: 1024,
            capacity_tokens: 1024 * 20,
            directional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.tokens_per_view == 0 {
            return Err(Error::arg("feature_dim and tokens_per_view must be positive"));
        }
        if self.tokens_per_view > self.capacity_tokens {
            return Err(Error::arg("capacity must hold at least one view"));
        }
        Ok(())
    }
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryToken {
    /// Unique within a bank, assigned in insertion order.
    pub id: u64,
    pub latent_key: Vec<f32>,
    pub direction_key: Vec3,
    pub value: Vec<f32>,
    /// Accumulated per-read attention mass (aligned + complementary).
    pub usage_sum: f64,
    /// Number of reads this token took part in.
    pub read_count: u64,
    pub birth_t: u64,
}

/// Mean attention mass per read; zero for a token that was never read.
pub fn usage(token: &MemoryToken) -> f64 {
    if token.read_count == 0 {
        0.0
    } else {
        token.usage_sum / token.read_count as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutResult {
    pub aligned: TokenBlock,
    pub complementary: TokenBlock,
    /// P × |bank| attention weights; rows sum to one.
    pub attention_aligned: TokenBlock,
    pub attention_comp: TokenBlock,
    pub query_direction: Vec3,
    pub tau: f64,
}

impl ReadoutResult {
    /// Mean Shannon entropy (nats) of all attention rows of both reads.
    pub fn mean_entropy(&self) -> f64 {
        let rows = self.attention_aligned.iter_rows().chain(self.attention_comp.iter_rows());
        let (sum, n) = rows.fold((0.0, 0usize), |(s, n), row| {
            let h: f64 = row.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum();
            (s + h, n + 1)
        });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Outcome of one sparsification pass, with the intermediate sets exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsifyReport {
    pub removed_ids: Vec<u64>,
    pub dense_ids: Vec<u64>,
    pub usage_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    config: MemoryConfig,
    tokens: Vec<MemoryToken>,
    next_id: u64,
}

impl MemoryBank {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            tokens: Vec::new(),
            next_id: 0,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn set_directional(&mut self, on: bool) {
        self.config.directional = on;
    }

    pub fn tokens(&self) -> &[MemoryToken] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn clear(&mut self) {
        self.tokens.clear();
        self.next_id = 0;
    }

    /// Reorders tokens; used to check that reads do not depend on storage order.
    pub fn permute(&mut self, order: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.tokens.len()];
        if order.len() != self.tokens.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::arg("not a permutation of the bank"));
        }
        self.tokens = order.iter().map(|&i| self.tokens[i].clone()).collect();
        Ok(())
    }

    fn check_query(&self, q_latent: &TokenBlock) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::EmptyBank);
        }
        if q_latent.cols() != self.config.feature_dim {
            return Err(Error::arg(format!(
                "query width {} != feature_dim {}",
                q_latent.cols(),
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    /// Raw P × |bank| scores `(q·k_L) · dir(k_D) / tau`, where `dir` is the
    /// signed directional factor or 1 when `direction` is `None`.
    fn scores(&self, q_latent: &TokenBlock, direction: Option<Vec3>, tau: f64) -> Result<TokenBlock> {
        self.check_query(q_latent)?;
        if !(tau > 0.0) {
            return Err(Error::arg("temperature must be positive"));
        }
        let n = self.tokens.len();
        let dir_factor: Vec<f64> = self
            .tokens
            .iter()
            .map(|t| direction.map_or(1.0, |q| q.dot(&t.direction_key)) / tau)
            .collect();
        let mut out = TokenBlock::zeros(q_latent.rows(), n);
        for p in 0..q_latent.rows() {
            let q = q_latent.row(p);
            let row = out.row_mut(p);
            for (i, tok) in self.tokens.iter().enumerate() {
                let latent: f64 = q.iter().zip(&tok.latent_key).map(|(a, &b)| a * f64::from(b)).sum();
                row[i] = latent * dir_factor[i];
            }
        }
        Ok(out)
    }

    /// Orientation-aligned similarity.
    pub fn aligned_scores(&self, q_latent: &TokenBlock, q_dir: &Vec3, tau: f64) -> Result<TokenBlock> {
        self.scores(q_latent, Some(*q_dir), tau)
    }

    /// Orientation-complementary similarity: the aligned score with the direction negated.
    pub fn complementary_scores(&self, q_latent: &TokenBlock, q_dir: &Vec3, tau: f64) -> Result<TokenBlock> {
        self.scores(q_latent, Some(-q_dir), tau)
    }

    fn attend(&self, scores: &TokenBlock) -> (TokenBlock, TokenBlock) {
        let c = self.config.feature_dim;
        let mut attn = scores.clone();
        let mut out = TokenBlock::zeros(scores.rows(), c);
        for p in 0..scores.rows() {
            let row = attn.row_mut(p);
            softmax_in_place(row);
            let dst = out.row_mut(p);
            for (a, tok) in row.iter().zip(&self.tokens) {
                for (d, &v) in dst.iter_mut().zip(&tok.value) {
                    *d += a * f64::from(v);
                }
            }
        }
        (out, attn)
    }

    /// Both reads without touching usage counters.
    pub fn compute_readout(&self, q_latent: &TokenBlock, k0_dir: &Vec3, kt_dir: &Vec3, sigma: f64) -> Result<ReadoutResult> {
        self.check_query(q_latent)?;
        let q_dir = direction_query(k0_dir, kt_dir)?;
        let tau = temperature(sigma);
        let (aligned_dir, comp_dir) = if self.config.directional {
            (Some(q_dir), Some(-q_dir))
        } else {
            (None, None)
        };
        let (aligned, attention_aligned) = self.attend(&self.scores(q_latent, aligned_dir, tau)?);
        let (complementary, attention_comp) = self.attend(&self.scores(q_latent, comp_dir, tau)?);
        Ok(ReadoutResult {
            aligned,
            complementary,
            attention_aligned,
            attention_comp,
            query_direction: q_dir,
            tau,
        })
    }

    /// Adds one read's attention mass to every token: the attention received
    /// from both reads, averaged over query rows.
    pub fn record_usage(&mut self, readout: &ReadoutResult) -> Result<()> {
        let n = self.tokens.len();
        if readout.attention_aligned.cols() != n || readout.attention_comp.cols() != n {
            return Err(Error::arg("readout does not match the current bank"));
        }
        let rows = readout.attention_aligned.rows();
        if rows == 0 {
            return Ok(());
        }
        let mut mass = vec![0.0; n];
        for block in [&readout.attention_aligned, &readout.attention_comp] {
            for row in block.iter_rows() {
                for (m, a) in mass.iter_mut().zip(row) {
                    *m += a;
                }
            }
        }
        for (tok, m) in self.tokens.iter_mut().zip(mass) {
            tok.usage_sum += m / rows as f64;
            tok.read_count += 1;
        }
        Ok(())
    }

    /// Performs both reads and records usage.
    pub fn read(&mut self, q_latent: &TokenBlock, k0_dir: &Vec3, kt_dir: &Vec3, sigma: f64) -> Result<ReadoutResult> {
        let r = self.compute_readout(q_latent, k0_dir, kt_dir, sigma)?;
        self.record_usage(&r)?;
        Ok(r)
    }

    /// Appends one view of P tokens sharing `direction_key`, sparsifying first
    /// as often as needed to stay within capacity. Returns the removed ids.
    pub fn write(&mut self, latent_keys: &TokenBlock, direction_key: &Vec3, values: &TokenBlock, t: u64) -> Result<Vec<u64>> {
        let (p, c) = (self.config.tokens_per_view, self.config.feature_dim);
        for (what, b) in [("latent keys", latent_keys), ("values", values)] {
            if b.rows() != p || b.cols() != c {
                return Err(Error::arg(format!("{what} must be {p}x{c}, got {}x{}", b.rows(), b.cols())));
            }
        }
        check_unit(direction_key, "direction key")?;
        let dir = direction_key.normalize();

        let mut removed = Vec::new();
        while self.tokens.len() + p > self.config.capacity_tokens && !self.tokens.is_empty() {
            removed.extend(self.sparsify().removed_ids);
        }
        for r in 0..p {
            self.tokens.push(MemoryToken {
                id: self.next_id,
                latent_key: latent_keys.row(r).iter().map(|&v| v as f32).collect(),
                direction_key: dir,
                value: values.row(r).iter().map(|&v| v as f32).collect(),
                usage_sum: 0.0,
                read_count: 0,
                birth_t: t,
            });
            self.next_id += 1;
        }
        Ok(removed)
    }

    /// Mean direction agreement of token `i` with every other token.
    pub fn coverage(&self, i: usize) -> Result<f64> {
        let n = self.tokens.len();
        if n < 2 {
            return Err(Error::UndefinedCoverage);
        }
        let ki = self.tokens.get(i).ok_or_else(|| Error::arg(format!("token index {i} out of range")))?.direction_key;
        let sum: Vec3 = self.tokens.iter().map(|t| t.direction_key).sum();
        Ok((ki.dot(&sum) - ki.dot(&ki)) / (n - 1) as f64)
    }

    /// Coverage of every token in O(n); zeros when the bank has fewer than two tokens.
    pub fn coverages(&self) -> Vec<f64> {
        let n = self.tokens.len();
        if n < 2 {
            return vec![0.0; n];
        }
        let sum: Vec3 = self.tokens.iter().map(|t| t.direction_key).sum();
        self.tokens
            .iter()
            .map(|t| (t.direction_key.dot(&sum) - t.direction_key.dot(&t.direction_key)) / (n - 1) as f64)
            .collect()
    }

    /// Decides which tokens one sparsification pass would drop, without mutating.
    ///
    /// Tokens are ranked by coverage (descending); the top half forms the dense
    /// subset. Dense tokens with usage at or below the nearest-rank 40th
    /// percentile of dense usage are candidates, and the removal set is then
    /// trimmed or padded from the dense subset to exactly ⌈n/5⌉ tokens ordered
    /// by (usage, birth time, id).
    pub fn plan_sparsify(&self) -> SparsifyReport {
        let n = self.tokens.len();
        if n == 0 {
            return SparsifyReport {
                removed_ids: Vec::new(),
                dense_ids: Vec::new(),
                usage_threshold: 0.0,
            };
        }
        let cov = self.coverages();
        let use_: Vec<f64> = self.tokens.iter().map(usage).collect();
        let prune_order = |a: usize, b: usize| {
            use_[a]
                .total_cmp(&use_[b])
                .then(self.tokens[a].birth_t.cmp(&self.tokens[b].birth_t))
                .then(self.tokens[a].id.cmp(&self.tokens[b].id))
        };

        let mut by_coverage: Vec<usize> = (0..n).collect();
        by_coverage.sort_by(|&a, &b| cov[b].total_cmp(&cov[a]).then(prune_order(a, b)));
        let dense_len = n.div_ceil(2);
        let mut dense = by_coverage[..dense_len].to_vec();

        let mut dense_usage: Vec<f64> = dense.iter().map(|&i| use_[i]).collect();
        dense_usage.sort_by(f64::total_cmp);
        let rank = nearest_rank(USAGE_PERCENTILE, dense_len);
        let threshold = dense_usage[rank - 1];

        let target = n.div_ceil(5);
        // candidates (usage <= threshold) sort ahead of the rest, so taking the
        // first `target` both trims and pads in one step
        dense.sort_by(|&a, &b| (use_[a] > threshold).cmp(&(use_[b] > threshold)).then(prune_order(a, b)));
        let removed_ids = dense[..target.min(dense_len)].iter().map(|&i| self.tokens[i].id).collect();
        SparsifyReport {
            removed_ids,
            dense_ids: by_coverage[..dense_len].iter().map(|&i| self.tokens[i].id).collect(),
            usage_threshold: threshold,
        }
    }

    /// Drops ⌈n/5⌉ low-usage tokens from the directionally dense half of the bank.
    pub fn sparsify(&mut self) -> SparsifyReport {
        let report = self.plan_sparsify();
        let removed: std::collections::HashSet<u64> = report.removed_ids.iter().copied().collect();
        self.tokens.retain(|t| !removed.contains(&t.id));
        report
    }

    pub(crate) fn from_parts(config: MemoryConfig, tokens: Vec<MemoryToken>, next_id: u64) -> Result<Self> {
        config.validate()?;
        if tokens.len() > config.capacity_tokens {
            return Err(Error::Validation("snapshot holds more tokens than its capacity".into()));
        }
        Ok(Self {
            config,
            tokens,
            next_id,
        })
    }

    pub(crate) fn next_id(&self) -> u64 {
        self.next_id
    }
}

/// 1-based nearest-rank index of the `pct` percentile among `n` sorted values.
fn nearest_rank(pct: f64, n: usize) -> usize {
    // integer form of ceil(pct/100 · n) so that exact products do not round up
    let scaled = (pct * 1000.0).round() as usize;
    (scaled * n).div_ceil(100_000).clamp(1, n)
}

/// Numerically stable softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests;
