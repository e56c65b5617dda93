//! Quantile-distribution algebra.
//!
//! Return distributions are carried in two forms: a [`QuantileDistribution`]
//! holds `M` sorted, equally weighted atom positions (atom `m` represents the
//! quantile midpoint `(m - 1/2) / M`), while a [`WeightedAtomSet`] holds
//! arbitrary `(position, weight)` pairs and is the working form for shifting
//! and mixing targets before they are projected back to a fixed atom count.
//!
//! Projection restores the step CDF of the atom set (sort, accumulate
//! weights) and inverts it at the midpoint quantile levels, which is the
//! 1-Wasserstein-optimal equal-weight approximation.

use crate::error::{Error, Result};

/// Atoms with weight below this are dropped before projection; the recursive
/// target construction multiplies weights geometrically, so tiny entries
/// accumulate without contributing measurable mass.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// An `M`-atom equal-weight distribution with sorted atom positions.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileDistribution {
    atoms: Vec<f64>,
}

impl QuantileDistribution {
    /// Builds a quantile distribution from raw positions, sorting them.
    pub fn from_unsorted(mut atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyInput("QuantileDistribution::from_unsorted"));
        }
        if !crate::vecmath::all_finite(&atoms) {
            return Err(Error::NonFinite("QuantileDistribution::from_unsorted"));
        }
        atoms.sort_by(|a, b| a.partial_cmp(b).expect("finite atoms"));
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Midpoint quantile level of atom `m` (0-based): `(m + 1/2) / M`.
    pub fn tau_mid(&self, m: usize) -> f64 {
        (m as f64 + 0.5) / self.atoms.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().sum::<f64>() / self.atoms.len() as f64
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms.iter().map(|a| a * a).sum::<f64>() / self.atoms.len() as f64
    }

    /// The equal-weight atom-set view of this distribution.
    pub fn to_weighted(&self) -> WeightedAtomSet {
        let w = 1.0 / self.atoms.len() as f64;
        WeightedAtomSet {
            entries: self.atoms.iter().map(|&p| (p, w)).collect(),
        }
    }
}

/// A finite mixture of Dirac atoms with nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAtomSet {
    /// `(position, weight)` pairs; not necessarily sorted.
    entries: Vec<(f64, f64)>,
}

impl WeightedAtomSet {
    /// Builds an atom set, normalizing the weights to sum to one.
    pub fn new(entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("WeightedAtomSet::new"));
        }
        let mut total = 0.0;
        for &(p, w) in &entries {
            if !p.is_finite() || !w.is_finite() {
                return Err(Error::NonFinite("WeightedAtomSet::new"));
            }
            if w < 0.0 {
                return Err(Error::invalid(
                    "WeightedAtomSet::new",
                    format!("negative weight {w}"),
                ));
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::invalid("WeightedAtomSet::new", "zero total weight"));
        }
        let inv = 1.0 / total;
        let entries = entries.into_iter().map(|(p, w)| (p, w * inv)).collect();
        Ok(Self { entries })
    }

    pub fn dirac(position: f64) -> Self {
        Self {
            entries: vec![(position, 1.0)],
        }
    }

    /// Equal-weight atom set over raw (possibly unsorted) positions.
    pub fn equal_weights(atoms: &[f64]) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyInput("WeightedAtomSet::equal_weights"));
        }
        let w = 1.0 / atoms.len() as f64;
        Self::new(atoms.iter().map(|&p| (p, w)).collect())
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w).sum()
    }

    pub fn mean(&self) -> f64 {
        self.entries.iter().map(|&(p, w)| p * w).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.entries.iter().map(|&(p, w)| p * p * w).sum()
    }

    /// Entries sorted by position with exact-duplicate positions merged.
    /// The resulting cumulative weights form the step CDF of the mixture.
    pub fn sorted_merged(&self) -> Vec<(f64, f64)> {
        let mut entries = self.entries.clone();
        entries.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite positions"));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(entries.len());
        for (p, w) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == p => last.1 += w,
                _ => merged.push((p, w)),
            }
        }
        merged
    }
}

/// Pushforward of the mixture under `x -> scale * x + shift`.
pub fn affine(d: &WeightedAtomSet, scale: f64, shift: f64) -> WeightedAtomSet {
    WeightedAtomSet {
        entries: d
            .entries
            .iter()
            .map(|&(p, w)| (scale * p + shift, w))
            .collect(),
    }
}

/// Mixture of atom sets with the given part weights (normalized internally).
///
/// Errors when all part weights are zero: the mixture is then undefined.
pub fn mix(parts: &[(&WeightedAtomSet, f64)]) -> Result<WeightedAtomSet> {
    if parts.is_empty() {
        return Err(Error::EmptyInput("qdist::mix"));
    }
    let mut total = 0.0;
    for &(_, w) in parts {
        if !w.is_finite() {
            return Err(Error::NonFinite("qdist::mix"));
        }
        if w < 0.0 {
            return Err(Error::invalid("qdist::mix", format!("negative part weight {w}")));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::invalid("qdist::mix", "all part weights are zero"));
    }
    let mut entries = Vec::with_capacity(parts.iter().map(|(d, _)| d.len()).sum());
    for &(d, w) in parts {
        if w == 0.0 {
            continue;
        }
        let part_scale = w / total;
        for &(p, pw) in &d.entries {
            entries.push((p, pw * part_scale));
        }
    }
    Ok(WeightedAtomSet { entries })
}

/// Projects an atom set onto `m_out` equal-weight quantile atoms.
///
/// Atom `i` (0-based) is the smallest position whose restored CDF reaches the
/// midpoint level `(i + 1/2) / m_out`; ties at jump points take the smallest
/// such position.
pub fn project(d: &WeightedAtomSet, m_out: usize) -> Result<QuantileDistribution> {
    if m_out == 0 {
        return Err(Error::invalid("qdist::project", "m_out must be >= 1"));
    }
    if d.is_empty() {
        return Err(Error::EmptyInput("qdist::project"));
    }
    let mut entries = d.sorted_merged();
    entries.retain(|&(_, w)| w >= WEIGHT_FLOOR);
    if entries.is_empty() {
        return Err(Error::invalid(
            "qdist::project",
            "all entries below the weight floor",
        ));
    }
    let total: f64 = entries.iter().map(|&(_, w)| w).sum();

    let mut atoms = Vec::with_capacity(m_out);
    let mut cum = 0.0;
    let mut idx = 0;
    for i in 0..m_out {
        let level = (i as f64 + 0.5) / m_out as f64 * total;
        while idx < entries.len() - 1 && cum + entries[idx].1 < level {
            cum += entries[idx].1;
            idx += 1;
        }
        atoms.push(entries[idx].0);
    }
    // Sortedness follows from the monotone walk; assert in debug builds.
    debug_assert!(atoms.windows(2).all(|w| w[0] <= w[1]));
    Ok(QuantileDistribution { atoms })
}

/// CDF-space `l_p` distance between two atom sets:
/// `(int |F_1(x) - F_2(x)|^p dx)^(1/p)`, evaluated exactly on the merged
/// breakpoints of the two step functions. For `p = 1` this is the
/// 1-Wasserstein distance.
pub fn cdf_distance(d1: &WeightedAtomSet, d2: &WeightedAtomSet, p: u32) -> f64 {
    assert!(p == 1 || p == 2, "only p = 1 and p = 2 are supported");
    let a = d1.sorted_merged();
    let b = d2.sorted_merged();
    let mut i = 0;
    let mut j = 0;
    let mut f1: f64 = 0.0;
    let mut f2: f64 = 0.0;
    let mut prev: Option<f64> = None;
    let mut acc = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&(xa, _)), Some(&(xb, _))) => xa.min(xb),
            (Some(&(xa, _)), None) => xa,
            (None, Some(&(xb, _))) => xb,
            (None, None) => unreachable!(),
        };
        if let Some(px) = prev {
            let diff = (f1 - f2).abs();
            acc += diff.powi(p as i32) * (x - px);
        }
        while i < a.len() && a[i].0 == x {
            f1 += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 == x {
            f2 += b[j].1;
            j += 1;
        }
        prev = Some(x);
    }
    if p == 1 {
        acc
    } else {
        acc.sqrt()
    }
}

/// 1-Wasserstein distance (`p = 1` CDF distance).
pub fn wasserstein1(d1: &WeightedAtomSet, d2: &WeightedAtomSet) -> f64 {
    cdf_distance(d1, d2, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qd(atoms: &[f64]) -> QuantileDistribution {
        QuantileDistribution::from_unsorted(atoms.to_vec()).unwrap()
    }

    fn was(entries: &[(f64, f64)]) -> WeightedAtomSet {
        WeightedAtomSet::new(entries.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_shift() {
        let d = was(&[(0.0, 0.5), (2.0, 0.5)]);
        let id = affine(&d, 1.0, 0.0);
        assert_eq!(id.entries(), d.entries());
        let shifted = affine(&d, 0.99, 1.0);
        assert!((shifted.entries()[0].0 - 1.0).abs() < 1e-15);
        assert!((shifted.entries()[1].0 - 2.98).abs() < 1e-15);
    }

    #[test]
    fn mix_two_diracs() {
        let d0 = WeightedAtomSet::dirac(0.0);
        let d1 = WeightedAtomSet::dirac(1.0);
        let m = mix(&[(&d0, 0.1), (&d1, 0.9)]).unwrap();
        let mut got = m.entries().to_vec();
        got.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!((got[0].0 - 0.0).abs() < 1e-15 && (got[0].1 - 0.1).abs() < 1e-15);
        assert!((got[1].0 - 1.0).abs() < 1e-15 && (got[1].1 - 0.9).abs() < 1e-15);
    }

    #[test]
    fn mix_single_part_is_identity() {
        let d = was(&[(1.0, 0.25), (3.0, 0.75)]);
        let m = mix(&[(&d, 1.0)]).unwrap();
        assert_eq!(m.entries(), d.entries());
    }

    #[test]
    fn mix_all_zero_weights_errors() {
        let d = WeightedAtomSet::dirac(0.0);
        assert!(mix(&[(&d, 0.0), (&d, 0.0)]).is_err());
    }

    #[test]
    fn project_fixed_point_on_equal_weight_set() {
        let d = was(&[(-1.0, 0.25), (0.5, 0.25), (2.0, 0.25), (7.0, 0.25)]);
        let q = project(&d, 4).unwrap();
        assert_eq!(q.atoms(), &[-1.0, 0.5, 2.0, 7.0]);
    }

    #[test]
    fn project_sp_example_quarter_three_quarter() {
        // F(0) = 0.25 >= tau_mid(0) = 0.25, so the first atom is 0; the
        // second level 0.75 is first reached at position 1.
        let d = was(&[(0.0, 0.25), (1.0, 0.75)]);
        let q = project(&d, 2).unwrap();
        assert_eq!(q.atoms(), &[0.0, 1.0]);
    }

    #[test]
    fn project_converges_in_wasserstein_as_atoms_grow() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let entries: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.gen_range(-5.0..5.0), rng.gen_range(0.01..1.0)))
            .collect();
        let d = WeightedAtomSet::new(entries).unwrap();
        let mut prev = f64::INFINITY;
        for m in [2usize, 4, 8, 16, 32, 64, 128, 256] {
            let q = project(&d, m).unwrap();
            let w = wasserstein1(&q.to_weighted(), &d);
            assert!(
                w <= prev + 1e-12,
                "W1 did not decrease at m = {m}: {w} > {prev}"
            );
            prev = w;
        }
        assert!(prev < 0.05, "W1 should shrink toward 0, got {prev}");
    }

    #[test]
    fn wasserstein_unit_transport_between_diracs() {
        let d0 = WeightedAtomSet::dirac(0.0);
        let d1 = WeightedAtomSet::dirac(1.0);
        assert!((cdf_distance(&d0, &d1, 1) - 1.0).abs() < 1e-15);
        assert!((cdf_distance(&d0, &d1, 2) - 1.0).abs() < 1e-15);
        assert_eq!(cdf_distance(&d0, &d0, 1), 0.0);
    }

    #[test]
    fn moments_of_simple_sets() {
        let d = qd(&[0.0, 2.0]);
        assert!((d.mean() - 1.0).abs() < 1e-15);
        assert!((d.second_moment() - 2.0).abs() < 1e-15);
        let c = WeightedAtomSet::dirac(3.0);
        assert!((c.mean() - 3.0).abs() < 1e-15);
        assert!((c.second_moment() - 9.0).abs() < 1e-15);
    }

    #[test]
    fn cdf_restoration_is_monotone_and_sums_to_one() {
        let d = was(&[(3.0, 0.2), (-1.0, 0.5), (3.0, 0.1), (0.0, 0.2)]);
        let merged = d.sorted_merged();
        assert!(merged.windows(2).all(|w| w[0].0 < w[1].0));
        let mut cum = 0.0;
        for &(_, w) in &merged {
            assert!(w >= 0.0);
            cum += w;
        }
        assert!((cum - 1.0).abs() < 1e-9);
    }

    /// Exhaustive search over candidate atom placements confirms that the
    /// midpoint-quantile projection is 1-Wasserstein optimal.
    #[test]
    fn projection_minimizes_w1_over_candidate_grids() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _case in 0..100 {
            let n = rng.gen_range(1..=6);
            let m_out = rng.gen_range(1..=3usize);
            let entries: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(0.05..1.0)))
                .collect();
            let d = WeightedAtomSet::new(entries).unwrap();
            let proj = project(&d, m_out).unwrap();
            let best = wasserstein1(&proj.to_weighted(), &d);

            // Source positions are optimal candidates for every output atom.
            let positions: Vec<f64> = d.sorted_merged().iter().map(|&(p, _)| p).collect();
            let mut indices = vec![0usize; m_out];
            loop {
                let cand: Vec<f64> = indices.iter().map(|&i| positions[i]).collect();
                let q = QuantileDistribution::from_unsorted(cand).unwrap();
                let w = wasserstein1(&q.to_weighted(), &d);
                assert!(
                    w >= best - 1e-9,
                    "found strictly better placement: {w} < {best}"
                );
                // Advance the multi-index.
                let mut k = 0;
                loop {
                    indices[k] += 1;
                    if indices[k] < positions.len() {
                        break;
                    }
                    indices[k] = 0;
                    k += 1;
                    if k == m_out {
                        break;
                    }
                }
                if k == m_out {
                    break;
                }
            }
        }
    }

    proptest! {
        #[test]
        fn affine_mean_is_linear(
            raw in proptest::collection::vec((-10.0f64..10.0, 0.01f64..1.0), 1..12),
            a in -3.0f64..3.0,
            b in -5.0f64..5.0,
        ) {
            let d = WeightedAtomSet::new(raw).unwrap();
            let lhs = affine(&d, a, b).mean();
            let rhs = a * d.mean() + b;
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn mix_mean_is_weighted_mean(
            raw1 in proptest::collection::vec((-5.0f64..5.0, 0.01f64..1.0), 1..8),
            raw2 in proptest::collection::vec((-5.0f64..5.0, 0.01f64..1.0), 1..8),
            w1 in 0.01f64..5.0,
            w2 in 0.01f64..5.0,
        ) {
            let d1 = WeightedAtomSet::new(raw1).unwrap();
            let d2 = WeightedAtomSet::new(raw2).unwrap();
            let m = mix(&[(&d1, w1), (&d2, w2)]).unwrap();
            let expect = (w1 * d1.mean() + w2 * d2.mean()) / (w1 + w2);
            prop_assert!((m.mean() - expect).abs() < 1e-9);
        }

        #[test]
        fn second_moment_dominates_mean_square(
            raw in proptest::collection::vec((-10.0f64..10.0, 0.01f64..1.0), 1..12),
        ) {
            let d = WeightedAtomSet::new(raw).unwrap();
            prop_assert!(d.second_moment() >= d.mean() * d.mean() - 1e-12);
        }

        #[test]
        fn cdf_distance_is_a_metric_on_triples(
            raw1 in proptest::collection::vec((-5.0f64..5.0, 0.05f64..1.0), 1..6),
            raw2 in proptest::collection::vec((-5.0f64..5.0, 0.05f64..1.0), 1..6),
            raw3 in proptest::collection::vec((-5.0f64..5.0, 0.05f64..1.0), 1..6),
            p in 1u32..=2,
        ) {
            let d1 = WeightedAtomSet::new(raw1).unwrap();
            let d2 = WeightedAtomSet::new(raw2).unwrap();
            let d3 = WeightedAtomSet::new(raw3).unwrap();
            let d12 = cdf_distance(&d1, &d2, p);
            let d21 = cdf_distance(&d2, &d1, p);
            let d13 = cdf_distance(&d1, &d3, p);
            let d23 = cdf_distance(&d2, &d3, p);
            prop_assert!((d12 - d21).abs() < 1e-12);
            prop_assert!(d13 <= d12 + d23 + 1e-9);
            prop_assert!(d12 >= 0.0);
        }
    }
}
