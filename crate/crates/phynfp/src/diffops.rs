//! Upwind difference operators on directed graphs.
//!
//! The base operator puts +1 on the diagonal and -1/k on each of a node's k
//! upstream neighbors, so each row approximates the spatial gradient along
//! the flow direction and annihilates constant fields. Headwater rows (no
//! upstream) fall back to the node's downstream neighbors, keeping the
//! directional coupling without explicit boundary conditions. The weighted
//! variants scale each edge contribution by 1/dx (gradient per unit length)
//! or dz/dx (elevation-driven term).
//!
//! On a directed ring the base operator is circulant and its frequency
//! response has the closed forms `2|sin(w/2)|` and, for the composite
//! `I + a*D`, `sqrt((1 + a - a*cos w)^2 + (a*sin w)^2)`; [`empirical_response`]
//! verifies the assembled operator against them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;

/// Which weighted variant a [`DifferenceOperator`] realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// Unweighted upwind difference.
    Base,
    /// Per-edge 1/dx weighting.
    D1,
    /// Per-edge dz/dx weighting (coefficients carry the sign of dz).
    D2,
    /// Second-difference smoothing stencil.
    Second,
}

/// Row-rule skeleton shared by all weighted operators built on one graph.
///
/// Row `i` of any first-difference operator is
/// `(D h)_i = inv_count_i * sum_e w[e] * (h_i - h_{nbr(e)})`,
/// where the neighbors are the upstream nodes, or the downstream nodes for
/// headwater rows. The per-edge weights `w` are supplied at assembly time.
#[derive(Debug, Clone)]
pub struct DiffStructure {
    num_nodes: usize,
    num_edges: usize,
    rows: Vec<RowRule>,
}

/// One row of a [`DiffStructure`].
#[derive(Debug, Clone)]
pub struct RowRule {
    /// `(neighbor node, edge index)` pairs contributing to this row.
    pub entries: Vec<(usize, usize)>,
    /// `1/k` over upstream neighbors, or `1/m` over downstream ones for
    /// headwater rows; 0 for isolated nodes.
    pub inv_count: f64,
    /// True when the row was built from downstream neighbors.
    pub boundary: bool,
}

impl DiffStructure {
    pub fn from_graph(g: &DirectedGraph) -> Arc<Self> {
        let rows = (0..g.num_nodes())
            .map(|i| {
                let ups = g.upstream_neighbors(i).expect("valid node");
                if !ups.is_empty() {
                    RowRule {
                        entries: ups.to_vec(),
                        inv_count: 1.0 / ups.len() as f64,
                        boundary: false,
                    }
                } else {
                    let downs = g.downstream_neighbors(i).expect("valid node");
                    if downs.is_empty() {
                        RowRule {
                            entries: Vec::new(),
                            inv_count: 0.0,
                            boundary: false,
                        }
                    } else {
                        RowRule {
                            entries: downs.to_vec(),
                            inv_count: 1.0 / downs.len() as f64,
                            boundary: true,
                        }
                    }
                }
            })
            .collect();
        Arc::new(Self {
            num_nodes: g.num_nodes(),
            num_edges: g.num_edges(),
            rows,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn rows(&self) -> &[RowRule] {
        &self.rows
    }

    /// Sparse operator with the given per-edge weights.
    ///
    /// The diagonal is accumulated as the sum of the off-diagonal
    /// magnitudes so every row sums to zero at floating-point level.
    pub fn assemble(&self, weights: &[f64], kind: OperatorKind) -> Result<DifferenceOperator> {
        if weights.len() != self.num_edges {
            return Err(Error::Shape(format!(
                "{} edge weights for {} edges",
                weights.len(),
                self.num_edges
            )));
        }
        let mut entries = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            let mut diag = 0.0;
            for &(j, e) in &row.entries {
                let coeff = row.inv_count * weights[e];
                diag += coeff;
                entries.push((i, j, -coeff));
            }
            if !row.entries.is_empty() {
                entries.push((i, i, diag));
            }
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        Ok(DifferenceOperator {
            dim: self.num_nodes,
            entries,
            kind,
            per_edge_dx: None,
            per_edge_dz: None,
        })
    }
}

/// Sparse difference operator stored as `(row, col, coefficient)` triplets
/// sorted by `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceOperator {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
    kind: OperatorKind,
    per_edge_dx: Option<Vec<f64>>,
    per_edge_dz: Option<Vec<f64>>,
}

impl DifferenceOperator {
    /// Operator from raw sorted triplets; callers are responsible for the
    /// row-structure invariants.
    pub fn from_raw(
        dim: usize,
        entries: Vec<(usize, usize, f64)>,
        kind: OperatorKind,
    ) -> Self {
        Self {
            dim,
            entries,
            kind,
            per_edge_dx: None,
            per_edge_dz: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Per-edge spatial steps the operator was built from, when applicable.
    pub fn per_edge_dx(&self) -> Option<&[f64]> {
        self.per_edge_dx.as_deref()
    }

    pub fn per_edge_dz(&self) -> Option<&[f64]> {
        self.per_edge_dz.as_deref()
    }

    /// Matrix-vector product `D x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "operator is {0}x{0} but vector has length {1}",
                self.dim,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.dim];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        Ok(y)
    }

    /// Dense copy; test oracle only.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.dim]; self.dim];
        for &(r, c, v) in &self.entries {
            m[r][c] += v;
        }
        m
    }

    /// Largest absolute row sum; zero for every well-formed first-difference
    /// operator.
    pub fn max_abs_row_sum(&self) -> f64 {
        let mut sums = vec![0.0; self.dim];
        for &(r, _, v) in &self.entries {
            sums[r] += v;
        }
        sums.iter().fold(0.0, |acc: f64, s| acc.max(s.abs()))
    }
}

/// Unweighted upwind difference matrix of a graph.
pub fn build_base_difference(g: &DirectedGraph) -> DifferenceOperator {
    let s = DiffStructure::from_graph(g);
    s.assemble(&vec![1.0; g.num_edges()], OperatorKind::Base)
        .expect("weights match edge count")
}

/// Upwind difference scaled per edge by `1/dx`.
pub fn build_d1(g: &DirectedGraph, dx: &[f64]) -> Result<DifferenceOperator> {
    check_dx(g, dx)?;
    let s = DiffStructure::from_graph(g);
    let weights: Vec<f64> = dx.iter().map(|d| 1.0 / d).collect();
    let mut op = s.assemble(&weights, OperatorKind::D1)?;
    op.per_edge_dx = Some(dx.to_vec());
    Ok(op)
}

/// Upwind difference scaled per edge by `dz/dx`; coefficients carry the
/// sign of `dz`.
pub fn build_d2(g: &DirectedGraph, dx: &[f64], dz: &[f64]) -> Result<DifferenceOperator> {
    check_dx(g, dx)?;
    if dz.len() != g.num_edges() {
        return Err(Error::Shape(format!(
            "{} dz values for {} edges",
            dz.len(),
            g.num_edges()
        )));
    }
    let s = DiffStructure::from_graph(g);
    let weights: Vec<f64> = dx.iter().zip(dz).map(|(x, z)| z / x).collect();
    let mut op = s.assemble(&weights, OperatorKind::D2)?;
    op.per_edge_dx = Some(dx.to_vec());
    op.per_edge_dz = Some(dz.to_vec());
    Ok(op)
}

fn check_dx(g: &DirectedGraph, dx: &[f64]) -> Result<()> {
    if dx.len() != g.num_edges() {
        return Err(Error::Shape(format!(
            "{} dx values for {} edges",
            dx.len(),
            g.num_edges()
        )));
    }
    if let Some(bad) = dx.iter().find(|d| !d.is_finite() || **d <= 0.0) {
        return Err(Error::Value(format!("non-positive spatial step {bad}")));
    }
    Ok(())
}

/// `(I + alpha * D) mu`.
pub fn apply_composite(mu: &[f64], alpha: f64, d: &DifferenceOperator) -> Result<Vec<f64>> {
    let dmu = d.apply(mu)?;
    Ok(mu.iter().zip(&dmu).map(|(m, v)| m + alpha * v).collect())
}

/// Magnitude of one frequency sample of an operator's response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyResponse {
    /// Angular frequency in radians, in `[0, pi]`.
    pub omega: f64,
    pub magnitude: f64,
}

/// `|D(e^{jw})| = 2|sin(w/2)|` for the unweighted difference operator.
pub fn closed_form_diff_magnitude(omega: f64) -> Result<f64> {
    check_omega(omega)?;
    Ok(2.0 * (omega / 2.0).sin().abs())
}

/// `|1 + a(1 - e^{-jw})| = sqrt((1 + a - a cos w)^2 + (a sin w)^2)`.
pub fn closed_form_composite_magnitude(omega: f64, alpha: f64) -> Result<f64> {
    check_omega(omega)?;
    let re = 1.0 + alpha - alpha * omega.cos();
    let im = alpha * omega.sin();
    Ok((re * re + im * im).sqrt())
}

fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=std::f64::consts::PI).contains(&omega) {
        return Err(Error::Range(format!("omega {omega} outside [0, pi]")));
    }
    Ok(())
}

/// Measured magnitude response of `I + alpha * D` on a directed ring.
///
/// `omega` must be an integer multiple of `2*pi/ring_size` so the sampled
/// complex exponential is periodic on the ring; the ring operator is then
/// circulant and the measured ratio matches the closed form to roundoff.
pub fn empirical_response(ring_size: usize, omega: f64, alpha: f64) -> Result<FrequencyResponse> {
    let (xc, xs, d) = ring_probe(ring_size, omega)?;
    let yc = apply_composite(&xc, alpha, &d)?;
    let ys = apply_composite(&xs, alpha, &d)?;
    Ok(FrequencyResponse {
        omega,
        magnitude: amplitude_ratio(&yc, &ys, &xc, &xs),
    })
}

/// Measured magnitude response of the bare difference operator on a ring.
pub fn empirical_diff_response(ring_size: usize, omega: f64) -> Result<FrequencyResponse> {
    let (xc, xs, d) = ring_probe(ring_size, omega)?;
    let yc = d.apply(&xc)?;
    let ys = d.apply(&xs)?;
    Ok(FrequencyResponse {
        omega,
        magnitude: amplitude_ratio(&yc, &ys, &xc, &xs),
    })
}

fn ring_probe(
    ring_size: usize,
    omega: f64,
) -> Result<(Vec<f64>, Vec<f64>, DifferenceOperator)> {
    if ring_size < 8 {
        return Err(Error::Precondition(format!(
            "ring size {ring_size} below minimum 8"
        )));
    }
    check_omega(omega)?;
    let fundamental = 2.0 * std::f64::consts::PI / ring_size as f64;
    let harmonic = omega / fundamental;
    if (harmonic - harmonic.round()).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "omega {omega} is not periodic on a ring of {ring_size} nodes"
        )));
    }
    let g = crate::graph::directed_ring(ring_size);
    let d = build_base_difference(&g);
    let xc: Vec<f64> = (0..ring_size).map(|n| (omega * n as f64).cos()).collect();
    let xs: Vec<f64> = (0..ring_size).map(|n| (omega * n as f64).sin()).collect();
    Ok((xc, xs, d))
}

fn amplitude_ratio(yc: &[f64], ys: &[f64], xc: &[f64], xs: &[f64]) -> f64 {
    let out: f64 = yc.iter().zip(ys).map(|(c, s)| c * c + s * s).sum();
    let inp: f64 = xc.iter().zip(xs).map(|(c, s)| c * c + s * s).sum();
    (out / inp).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{directed_ring, DirectedGraph};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn graph(labels: &[&str], edges: &[(&str, &str)]) -> DirectedGraph {
        let ls: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        let es: Vec<(String, String)> = edges
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let feats = vec![vec![1.0]; es.len()];
        DirectedGraph::from_parts(&ls, &es, &feats).unwrap()
    }

    fn dense(op: &DifferenceOperator) -> Vec<Vec<f64>> {
        op.to_dense()
    }

    #[test]
    fn base_on_path_matches_boundary_rule() {
        let g = graph(&["v0", "v1", "v2"], &[("v0", "v1"), ("v1", "v2")]);
        let d = dense(&build_base_difference(&g));
        assert_eq!(d[0], vec![1.0, -1.0, 0.0]);
        assert_eq!(d[1], vec![-1.0, 1.0, 0.0]);
        assert_eq!(d[2], vec![0.0, -1.0, 1.0]);
    }

    #[test]
    fn base_on_confluence_averages_upstream() {
        let g = graph(&["a", "b", "c"], &[("a", "c"), ("b", "c")]);
        let d = dense(&build_base_difference(&g));
        assert_eq!(d[2], vec![-0.5, -0.5, 1.0]);
        // headwater rows couple to the shared downstream node
        assert_eq!(d[0], vec![1.0, 0.0, -1.0]);
        assert_eq!(d[1], vec![0.0, 1.0, -1.0]);
    }

    #[test]
    fn isolated_node_gets_zero_row() {
        let g = DirectedGraph::from_parts(
            &["a".into(), "b".into(), "lone".into()],
            &[("a".into(), "b".into())],
            &[vec![1.0]],
        )
        .unwrap();
        let lone = g.node_index("lone").unwrap();
        let d = dense(&build_base_difference(&g));
        assert!(d[lone].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn base_annihilates_constants() {
        let g = graph(
            &["a", "b", "c", "d"],
            &[("a", "c"), ("b", "c"), ("c", "d")],
        );
        let d = build_base_difference(&g);
        let out = d.apply(&vec![3.25; 4]).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn d1_uniform_dx_scales_base() {
        let g = graph(&["v0", "v1", "v2"], &[("v0", "v1"), ("v1", "v2")]);
        let base = dense(&build_base_difference(&g));
        let d1 = dense(&build_d1(&g, &[2.0, 2.0]).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                assert!((d1[i][j] - 0.5 * base[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn d1_confluence_hand_computed() {
        // dx = 1.0 on a->c, 4.0 on b->c; row c: -(1/2)(1/1), -(1/2)(1/4), diag sum
        let g = graph(&["a", "b", "c"], &[("a", "c"), ("b", "c")]);
        let d1 = dense(&build_d1(&g, &[1.0, 4.0]).unwrap());
        assert!((d1[2][0] - -0.5).abs() < 1e-15);
        assert!((d1[2][1] - -0.125).abs() < 1e-15);
        assert!((d1[2][2] - 0.625).abs() < 1e-15);
        let row_sum: f64 = d1[2].iter().sum();
        assert!(row_sum.abs() < 1e-15);
    }

    #[test]
    fn d1_rejects_non_positive_dx() {
        let g = graph(&["a", "b"], &[("a", "b")]);
        assert!(matches!(build_d1(&g, &[0.0]), Err(Error::Value(_))));
        assert!(matches!(build_d1(&g, &[-1.0]), Err(Error::Value(_))));
    }

    #[test]
    fn d2_uniform_is_scaled_base_and_zero_dz_vanishes() {
        let g = graph(&["v0", "v1", "v2"], &[("v0", "v1"), ("v1", "v2")]);
        let base = dense(&build_base_difference(&g));
        let d2 = dense(&build_d2(&g, &[1.0, 1.0], &[3.0, 3.0]).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                assert!((d2[i][j] - 3.0 * base[i][j]).abs() < 1e-15);
            }
        }
        let zero = build_d2(&g, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(zero.entries().iter().all(|&(_, _, v)| v == 0.0));
    }

    #[test]
    fn d2_mixed_signs_keep_zero_row_sums() {
        let g = graph(&["a", "b", "c", "d"], &[("a", "c"), ("b", "c"), ("c", "d")]);
        let d2 = build_d2(&g, &[0.5, 2.0, 1.5], &[0.7, -1.3, 0.4]).unwrap();
        assert!(d2.max_abs_row_sum() < 1e-12);
        // confluence row carries both signs
        let dense = d2.to_dense();
        assert!(dense[2][0] < 0.0 && dense[2][1] > 0.0);
    }

    #[test]
    fn composite_identity_and_constant() {
        let g = graph(&["a", "b", "c"], &[("a", "b"), ("b", "c")]);
        let d = build_base_difference(&g);
        let mu = vec![0.3, -1.2, 2.5];
        assert_eq!(apply_composite(&mu, 0.0, &d).unwrap(), mu);
        let constant = vec![4.0; 3];
        let out = apply_composite(&constant, 1.7, &d).unwrap();
        for (o, c) in out.iter().zip(&constant) {
            assert!((o - c).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_matches_dense_oracle() {
        let g = graph(
            &["n0", "n1", "n2", "n3", "n4"],
            &[("n0", "n1"), ("n1", "n2"), ("n2", "n3"), ("n3", "n4")],
        );
        let d = build_base_difference(&g);
        let mu = [0.17, -0.92, 1.4, 0.05, -2.3];
        let out = apply_composite(&mu, 0.3, &d).unwrap();
        let m = d.to_dense();
        for i in 0..5 {
            let mut expect = mu[i];
            for j in 0..5 {
                expect += 0.3 * m[i][j] * mu[j];
            }
            assert!((out[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_forms_at_reference_points() {
        assert_eq!(closed_form_diff_magnitude(0.0).unwrap(), 0.0);
        assert!((closed_form_diff_magnitude(PI).unwrap() - 2.0).abs() < 1e-15);
        assert!((closed_form_diff_magnitude(PI / 2.0).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            closed_form_diff_magnitude(-0.1),
            Err(Error::Range(_))
        ));

        assert!((closed_form_composite_magnitude(0.0, 0.9).unwrap() - 1.0).abs() < 1e-15);
        assert!((closed_form_composite_magnitude(PI, 0.5).unwrap() - 2.0).abs() < 1e-12);
        assert!((closed_form_composite_magnitude(PI, -0.25).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empirical_matches_closed_form_on_ring() {
        let resp = empirical_response(256, 0.0, 1.0).unwrap();
        assert!((resp.magnitude - 1.0).abs() < 1e-12);

        let resp = empirical_response(256, PI, 1.0).unwrap();
        assert!((resp.magnitude - 3.0).abs() < 1e-10);

        let omega = 2.0 * PI * 8.0 / 64.0;
        let resp = empirical_response(64, omega, 0.0).unwrap();
        assert!((resp.magnitude - 1.0).abs() < 1e-12);

        for k in [1usize, 5, 17, 31, 64] {
            let omega = 2.0 * PI * k as f64 / 128.0;
            let emp = empirical_response(128, omega, 0.5).unwrap().magnitude;
            let closed = closed_form_composite_magnitude(omega, 0.5).unwrap();
            assert!((emp - closed).abs() < 1e-10, "k={k}");
            let emp_d = empirical_diff_response(128, omega).unwrap().magnitude;
            let closed_d = closed_form_diff_magnitude(omega).unwrap();
            assert!((emp_d - closed_d).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn non_periodic_omega_rejected() {
        assert!(matches!(
            empirical_response(64, 0.1, 1.0),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            empirical_response(4, 0.0, 1.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn diff_magnitude_is_non_decreasing() {
        let mut prev = -1.0;
        for k in 0..1000 {
            let omega = PI * k as f64 / 999.0;
            let m = closed_form_diff_magnitude(omega).unwrap();
            assert!(m >= prev - 1e-15);
            prev = m;
        }
    }

    #[test]
    fn ring_rows_have_single_upstream() {
        let g = directed_ring(16);
        let d = build_base_difference(&g);
        let m = d.to_dense();
        for i in 0..16 {
            assert_eq!(m[i][i], 1.0);
            assert_eq!(m[i][(i + 15) % 16], -1.0);
        }
    }

    proptest! {
        #[test]
        fn row_sums_vanish_on_random_graphs(
            n in 2usize..12,
            edge_bits in proptest::collection::vec(any::<bool>(), 144),
            dx_raw in proptest::collection::vec(0.05f64..10.0, 144),
            dz_raw in proptest::collection::vec(-5.0f64..5.0, 144),
        ) {
            let labels: Vec<String> = (0..n).map(|i| format!("n{i:02}")).collect();
            let mut edges = Vec::new();
            for s in 0..n {
                for d in 0..n {
                    if s != d && edge_bits[s * 12 + d] {
                        edges.push((labels[s].clone(), labels[d].clone()));
                    }
                }
            }
            let feats = vec![vec![1.0]; edges.len()];
            let g = DirectedGraph::from_parts(&labels, &edges, &feats).unwrap();
            let m = g.num_edges();
            let dx: Vec<f64> = dx_raw[..m].to_vec();
            let dz: Vec<f64> = dz_raw[..m].to_vec();

            let base = build_base_difference(&g);
            prop_assert!(base.max_abs_row_sum() < 1e-12);
            let d1 = build_d1(&g, &dx).unwrap();
            prop_assert!(d1.max_abs_row_sum() < 1e-12);
            let d2 = build_d2(&g, &dx, &dz).unwrap();
            prop_assert!(d2.max_abs_row_sum() < 1e-12);

            // constant fields have zero gradient
            let ones = vec![1.0; n];
            prop_assert!(base.apply(&ones).unwrap().iter().all(|v| v.abs() < 1e-12));
        }

        #[test]
        fn d1_scaling_property(c in 0.1f64..10.0) {
            let g = graph(
                &["a", "b", "c", "d"],
                &[("a", "c"), ("b", "c"), ("c", "d")],
            );
            let dx = [0.5, 1.25, 2.0];
            let scaled: Vec<f64> = dx.iter().map(|v| v * c).collect();
            let d1 = build_d1(&g, &dx).unwrap();
            let d1s = build_d1(&g, &scaled).unwrap();
            for (&(r, col, v), &(rs, cs, vs)) in d1.entries().iter().zip(d1s.entries()) {
                prop_assert_eq!((r, col), (rs, cs));
                prop_assert!((vs - v / c).abs() < 1e-12 * v.abs().max(1.0));
            }
        }
    }
}
