//! GE-aware spatial targeting under a treatment budget.
//!
//! Treating location `i` is worth `τ_PE,i + τ_GE,i·p_i − c` on its own,
//! where `p_i` is the probability that its spillover state crosses the
//! boundary within the horizon. Treating both `i` and `j` adds the pairwise
//! externality `φ_ij + φ_ji`. Welfare of a set is the sum of both parts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest instance [`select_targets_exact`] accepts.
pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyInputs {
    pub tau_pe: Vec<f64>,
    pub tau_ge: Vec<f64>,
    /// Probability that the boundary is crossed within the horizon.
    pub crossing_prob: Vec<f64>,
    /// `phi[i][j]` is the externality of treating `i` on `j`.
    pub phi: Vec<Vec<f64>>,
    pub cost: f64,
    pub budget: usize,
}

impl PolicyInputs {
    pub fn n(&self) -> usize {
        self.tau_pe.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.tau_ge.len() != n || self.crossing_prob.len() != n || self.phi.len() != n {
            return Err(Error::invalid("tau_pe, tau_ge, crossing_prob and phi must have one entry per location"));
        }
        if self.tau_pe.iter().chain(&self.tau_ge).any(|v| !v.is_finite()) || !self.cost.is_finite() {
            return Err(Error::invalid("effects and cost must be finite"));
        }
        if let Some(i) = self.crossing_prob.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("crossing_prob[{i}] lies outside [0, 1]")));
        }
        for (i, row) in self.phi.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!("phi row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!("phi row {i} has a negative or non-finite entry")));
            }
            if row[i] != 0.0 {
                return Err(Error::invalid(format!("phi[{i}][{i}] must be zero")));
            }
        }
        Ok(())
    }

    /// Stand-alone benefit `τ_PE,i + τ_GE,i·p_i − c`.
    pub fn own_benefit(&self, i: usize) -> f64 {
        self.tau_pe[i] + self.tau_ge[i] * self.crossing_prob[i] - self.cost
    }

    /// Copy with every crossing probability set to zero.
    pub fn pe_view(&self) -> Self {
        Self { crossing_prob: vec![0.0; self.n()], ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    /// Selected locations in ascending order.
    pub selected: Vec<usize>,
    pub total_welfare: f64,
    /// Marginal net benefit of the last location admitted; `None` for an
    /// empty selection.
    pub shadow_price_mu: Option<f64>,
    /// Net benefit of each location relative to the rest of the selection:
    /// for a selected location, what removing it would cost; otherwise
    /// what adding it would gain.
    pub per_location_net_benefit: Vec<f64>,
}

/// Marginal welfare of adding `i` to `selected`.
pub fn net_benefit(i: usize, selected: &[usize], inputs: &PolicyInputs) -> f64 {
    let pair: f64 = selected.iter().filter(|&&j| j != i).map(|&j| inputs.phi[i][j] + inputs.phi[j][i]).sum();
    inputs.own_benefit(i) + pair
}

/// Welfare of a set, summed in ascending index order.
pub fn welfare(inputs: &PolicyInputs, selected: &[usize]) -> f64 {
    let mut s = selected.to_vec();
    s.sort_unstable();
    let mut total = 0.0;
    for (a, &i) in s.iter().enumerate() {
        total += inputs.own_benefit(i);
        for &j in &s[..a] {
            total += inputs.phi[i][j] + inputs.phi[j][i];
        }
    }
    total
}

fn finish(inputs: &PolicyInputs, mut selected: Vec<usize>, mu: Option<f64>) -> PolicyResult {
    selected.sort_unstable();
    let per_location_net_benefit = (0..inputs.n()).map(|i| net_benefit(i, &selected, inputs)).collect();
    PolicyResult { total_welfare: welfare(inputs, &selected), selected, shadow_price_mu: mu, per_location_net_benefit }
}

/// Add the location with the largest positive marginal benefit until the
/// budget is spent or no candidate helps. Ties go to the lower index.
pub fn select_targets_greedy(inputs: &PolicyInputs) -> Result<PolicyResult> {
    inputs.validate()?;
    let n = inputs.n();
    let mut selected = Vec::new();
    let mut taken = vec![false; n];
    // marginal[i] tracks net_benefit(i, selected) incrementally
    let mut marginal: Vec<f64> = (0..n).map(|i| inputs.own_benefit(i)).collect();
    let mut mu = None;
    while selected.len() < inputs.budget {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            if marginal[i] > 0.0 && best.is_none_or(|b| marginal[i] > marginal[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        mu = Some(marginal[b]);
        taken[b] = true;
        selected.push(b);
        for i in 0..n {
            marginal[i] += inputs.phi[i][b] + inputs.phi[b][i];
        }
    }
    Ok(finish(inputs, selected, mu))
}

/// Exhaustive search over every subset within the budget.
///
/// Among equally good subsets the one with the smallest bitmask wins.
pub fn select_targets_exact(inputs: &PolicyInputs) -> Result<PolicyResult> {
    inputs.validate()?;
    let n = inputs.n();
    if n > EXACT_LIMIT {
        return Err(Error::SizeLimit(format!("exact search supports at most {EXACT_LIMIT} locations, got {n}")));
    }
    let own: Vec<f64> = (0..n).map(|i| inputs.own_benefit(i)).collect();
    let pair: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| inputs.phi[i][j] + inputs.phi[j][i]).collect()).collect();
    let size = 1usize << n;
    let mut value = vec![0.0; size];
    let mut best = (0.0, 0usize);
    for mask in 1..size {
        let i = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        let mut v = value[rest] + own[i];
        let mut r = rest;
        while r != 0 {
            let j = r.trailing_zeros() as usize;
            v += pair[i][j];
            r &= r - 1;
        }
        value[mask] = v;
        if mask.count_ones() as usize <= inputs.budget && v > best.0 {
            best = (v, mask);
        }
    }
    let selected: Vec<usize> = (0..n).filter(|&i| best.1 >> i & 1 == 1).collect();
    // the marginal benefit of the highest-index member given the others
    let mu = selected.last().map(|&last| net_benefit(last, &selected, inputs));
    Ok(finish(inputs, selected, mu))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Greedy,
    Exact,
    /// Exact up to [`EXACT_LIMIT`] locations, greedy beyond.
    Auto,
}

pub fn select_targets(inputs: &PolicyInputs, selector: Selector) -> Result<PolicyResult> {
    match selector {
        Selector::Greedy => select_targets_greedy(inputs),
        Selector::Exact => select_targets_exact(inputs),
        Selector::Auto if inputs.n() <= EXACT_LIMIT => select_targets_exact(inputs),
        Selector::Auto => select_targets_greedy(inputs),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetingComparison {
    pub pe_selection: Vec<usize>,
    pub ge_selection: Vec<usize>,
    /// Both welfares are evaluated with the true crossing probabilities.
    pub pe_welfare: f64,
    pub ge_welfare: f64,
    /// `ge_welfare / pe_welfare`; 1 when the selections coincide and `None`
    /// when the PE selection has non-positive welfare otherwise.
    pub welfare_gain_ratio: Option<f64>,
}

/// Select once ignoring boundary crossings and once with them, then score
/// both selections under the crossing-aware welfare.
pub fn compare_pe_vs_ge_targeting(inputs: &PolicyInputs, budget: usize, selector: Selector) -> Result<TargetingComparison> {
    let ge_inputs = PolicyInputs { budget, ..inputs.clone() };
    let pe = select_targets(&ge_inputs.pe_view(), selector)?;
    let ge = select_targets(&ge_inputs, selector)?;
    let pe_welfare = welfare(&ge_inputs, &pe.selected);
    let ratio = if pe.selected == ge.selected {
        Some(1.0)
    } else if pe_welfare > 0.0 {
        Some(ge.total_welfare / pe_welfare)
    } else {
        None
    };
    Ok(TargetingComparison {
        pe_selection: pe.selected,
        ge_selection: ge.selected,
        pe_welfare,
        ge_welfare: ge.total_welfare,
        welfare_gain_ratio: ratio,
    })
}

/// Random instance with `n` locations: effects and probabilities uniform
/// on `[0, 1]`, cost uniform on `[0.3, 0.8]`, a sparse non-negative
/// externality matrix and a budget between 1 and `max(1, n/2)`.
pub fn random_instance<R: Rng + ?Sized>(n: usize, rng: &mut R) -> PolicyInputs {
    let unit = |rng: &mut R| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>()).collect() };
    let tau_pe = unit(rng);
    let tau_ge = unit(rng);
    let crossing_prob = unit(rng);
    let phi = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i != j && rng.random::<f64>() < 0.3 { 0.2 * rng.random::<f64>() } else { 0.0 })
                .collect()
        })
        .collect();
    let cost = rng.random_range(0.3..=0.8);
    let budget = rng.random_range(1..=(n / 2).max(1));
    PolicyInputs { tau_pe, tau_ge, crossing_prob, phi, cost, budget }
}
