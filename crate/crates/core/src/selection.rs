//! Server-side coordinate selection.
//!
//! Each round the server ranks the global update buffer by magnitude to get
//! the Top-r candidate set, then keeps the `k` candidates that have waited
//! longest since their last transmission (AgeTop-k), or `k` uniformly random
//! candidates (rTop-k). All ties are broken toward the lower coordinate index.

use std::cmp::Ordering;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionRule {
    AgeTopK,
    RandomTopK,
}

impl SelectionRule {
    pub fn name(self) -> &'static str {
        match self {
            SelectionRule::AgeTopK => "agetopk",
            SelectionRule::RandomTopK => "rtopk",
        }
    }
}

impl std::str::FromStr for SelectionRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "agetopk" => Ok(SelectionRule::AgeTopK),
            "rtopk" => Ok(SelectionRule::RandomTopK),
            other => Err(format!("expected one of agetopk, rtopk; got `{other}`")),
        }
    }
}

/// The reduced selector: `k` distinct coordinates in ascending order.
/// Row `i` of the selector picks coordinate `selected[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectorSpec {
    pub r_abs: usize,
    pub k_abs: usize,
    selected: Vec<usize>,
}

impl SelectorSpec {
    /// Validates and sorts `selected`.
    pub fn new(r_abs: usize, mut selected: Vec<usize>, dim: usize) -> Result<Self> {
        selected.sort_unstable();
        if let Some(&bad) = selected.iter().find(|&&j| j >= dim) {
            return Err(Error::IndexOutOfRange { index: bad, dim });
        }
        if selected.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("selector", "duplicate coordinate"));
        }
        Ok(Self {
            r_abs,
            k_abs: selected.len(),
            selected,
        })
    }

    /// Selector keeping every coordinate.
    pub fn full(dim: usize) -> Self {
        Self {
            r_abs: dim,
            k_abs: dim,
            selected: (0..dim).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.selected
    }

    pub fn contains(&self, j: usize) -> bool {
        self.selected.binary_search(&j).is_ok()
    }
}

/// Absolute `(r, k)` from ratios: `r = round(r_ratio * d)`, `k = round(k_ratio * r)`
/// (ties to even), `k` bumped to the next even number, then clamped to `[2, r]`.
/// When `r` is odd and the bumped `k` exceeds it, `k` becomes `r - 1`.
pub fn resolve_ratios(d: usize, r_ratio: f64, k_ratio: f64) -> Result<(usize, usize)> {
    if d < 2 {
        return Err(Error::invalid("d", "model dimension must be >= 2"));
    }
    for (name, v) in [("r_ratio", r_ratio), ("k_ratio", k_ratio)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::invalid(name, format!("must be in (0, 1], got {v}")));
        }
    }
    let r_abs = ((r_ratio * d as f64).round_ties_even() as usize).clamp(1, d);
    let mut k_abs = (k_ratio * r_abs as f64).round_ties_even() as usize;
    if k_abs % 2 == 1 {
        k_abs += 1;
    }
    let k_abs = k_abs.max(2).min(r_abs - r_abs % 2);
    if k_abs < 2 {
        return Err(Error::invalid(
            "r_ratio",
            format!("r = {r_abs} leaves no room for an even k >= 2"),
        ));
    }
    Ok((r_abs, k_abs))
}

fn by_magnitude(buffer: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| buffer[b].abs().total_cmp(&buffer[a].abs()).then(a.cmp(&b))
}

/// Indices of the `r` largest `|buffer[j]|`, returned in ascending index order.
pub fn select_top_r(buffer: &[f64], r_abs: usize) -> Result<Vec<usize>> {
    if r_abs > buffer.len() {
        return Err(Error::invalid(
            "r_abs",
            format!("{r_abs} exceeds dimension {}", buffer.len()),
        ));
    }
    let mut idx: Vec<usize> = (0..buffer.len()).collect();
    if r_abs < idx.len() && r_abs > 0 {
        idx.select_nth_unstable_by(r_abs - 1, by_magnitude(buffer));
    }
    idx.truncate(r_abs);
    idx.sort_unstable();
    Ok(idx)
}

fn check_k(candidates: &[usize], k_abs: usize) -> Result<()> {
    if k_abs > candidates.len() {
        return Err(Error::invalid(
            "k_abs",
            format!("{k_abs} exceeds candidate count {}", candidates.len()),
        ));
    }
    Ok(())
}

/// The `k` candidates with the largest age.
pub fn select_agetop_k(candidates: &[usize], age: &[u64], k_abs: usize) -> Result<SelectorSpec> {
    check_k(candidates, k_abs)?;
    if let Some(&bad) = candidates.iter().find(|&&j| j >= age.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            dim: age.len(),
        });
    }
    let mut picked = candidates.to_vec();
    if k_abs < picked.len() && k_abs > 0 {
        picked.select_nth_unstable_by(k_abs - 1, |&a, &b| age[b].cmp(&age[a]).then(a.cmp(&b)));
    }
    picked.truncate(k_abs);
    SelectorSpec::new(candidates.len(), picked, age.len())
}

/// Like [`select_agetop_k`], but equal ages prefer the larger `|buffer[j]|`
/// before the lower index. With uniform ages this is top-k by magnitude
/// within the candidates.
pub fn select_agetop_k_by_magnitude(
    candidates: &[usize],
    age: &[u64],
    buffer: &[f64],
    k_abs: usize,
) -> Result<SelectorSpec> {
    check_k(candidates, k_abs)?;
    if buffer.len() != age.len() {
        return Err(Error::DimensionMismatch {
            context: "age and buffer",
            expected: age.len(),
            found: buffer.len(),
        });
    }
    if let Some(&bad) = candidates.iter().find(|&&j| j >= age.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            dim: age.len(),
        });
    }
    let mut picked = candidates.to_vec();
    if k_abs < picked.len() && k_abs > 0 {
        let by_mag = by_magnitude(buffer);
        picked.select_nth_unstable_by(k_abs - 1, |a, b| age[*b].cmp(&age[*a]).then_with(|| by_mag(a, b)));
    }
    picked.truncate(k_abs);
    SelectorSpec::new(candidates.len(), picked, age.len())
}

/// A uniformly random `k`-subset of the candidates.
pub fn select_rtop_k(candidates: &[usize], k_abs: usize, dim: usize, rng: &mut SimRng) -> Result<SelectorSpec> {
    check_k(candidates, k_abs)?;
    let picked = index::sample(rng, candidates.len(), k_abs)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    SelectorSpec::new(candidates.len(), picked, dim)
}

/// `u = S_hat * delta`: gathers the selected coordinates in selector order.
pub fn compress(delta: &[f64], spec: &SelectorSpec) -> Result<Vec<f64>> {
    spec.selected
        .iter()
        .map(|&j| {
            delta
                .get(j)
                .copied()
                .ok_or(Error::IndexOutOfRange { index: j, dim: delta.len() })
        })
        .collect()
}

/// `S_hat^T * u`: scatters into a zero vector of length `dim`.
pub fn decompress(u_hat: &[f64], spec: &SelectorSpec, dim: usize) -> Result<Vec<f64>> {
    if u_hat.len() != spec.k_abs {
        return Err(Error::DimensionMismatch {
            context: "decompress",
            expected: spec.k_abs,
            found: u_hat.len(),
        });
    }
    let mut out = vec![0.0; dim];
    for (&j, &v) in spec.selected.iter().zip(u_hat) {
        *out.get_mut(j).ok_or(Error::IndexOutOfRange { index: j, dim })? = v;
    }
    Ok(out)
}

/// Ratio of the largest to the `r`-th largest magnitude of `buffer`;
/// `None` when the `r`-th largest is zero.
pub fn magnitude_ratio(buffer: &[f64], r_abs: usize) -> Option<f64> {
    if r_abs == 0 || r_abs > buffer.len() {
        return None;
    }
    let mut mags: Vec<f64> = buffer.iter().map(|v| v.abs()).collect();
    let (_, rth, _) = mags.select_nth_unstable_by(r_abs - 1, |a, b| b.total_cmp(a));
    let rth = *rth;
    let max = mags.iter().copied().fold(0.0, f64::max);
    (rth > 0.0).then(|| max / rth)
}

/// Age-of-information vector, global update buffer, and bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionState {
    pub age: Vec<u64>,
    pub buffer: Vec<f64>,
    pub round: u64,
    ever_selected: Vec<bool>,
}

impl SelectionState {
    /// Zero ages and a zero buffer.
    pub fn new(dim: usize) -> Self {
        Self {
            age: vec![0; dim],
            buffer: vec![0.0; dim],
            round: 0,
            ever_selected: vec![false; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.buffer.len()
    }

    /// Candidate set and selector for this round.
    pub fn select(&self, rule: SelectionRule, r_abs: usize, k_abs: usize, rng: &mut SimRng) -> Result<SelectorSpec> {
        let candidates = select_top_r(&self.buffer, r_abs)?;
        let spec = match rule {
            SelectionRule::AgeTopK => select_agetop_k_by_magnitude(&candidates, &self.age, &self.buffer, k_abs)?,
            SelectionRule::RandomTopK => select_rtop_k(&candidates, k_abs, self.dim(), rng)?,
        };
        Ok(spec)
    }

    /// `buffer[j] = delta_hat[j]` for selected `j`.
    pub fn refresh_buffer(&mut self, spec: &SelectorSpec, delta_hat: &[f64]) -> Result<()> {
        if delta_hat.len() != self.buffer.len() {
            return Err(Error::DimensionMismatch {
                context: "buffer refresh",
                expected: self.buffer.len(),
                found: delta_hat.len(),
            });
        }
        for &j in &spec.selected {
            self.buffer[j] = delta_hat[j];
        }
        Ok(())
    }

    /// Resets the age of selected coordinates, ages the rest, and advances the round.
    pub fn update_aoi(&mut self, spec: &SelectorSpec) {
        for a in &mut self.age {
            *a += 1;
        }
        for &j in &spec.selected {
            self.age[j] = 0;
            self.ever_selected[j] = true;
        }
        self.round += 1;
    }

    pub fn never_selected(&self) -> usize {
        self.ever_selected.iter().filter(|&&s| !s).count()
    }

    pub fn max_age(&self) -> u64 {
        self.age.iter().copied().max().unwrap_or(0)
    }
}
