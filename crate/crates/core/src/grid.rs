//! Truncated tensor grid over `(x, y)` and the finite-difference operators
//! shared by all solvers.
//!
//! Node layout: the multi-index runs over the `k` histogram axes followed by
//! the `d` major-state axes, the last `y` axis varying fastest. Crowd fields
//! are stored component-major (`values[c * nodes + node]`).

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub n_x: Vec<usize>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    pub n_y: Vec<usize>,
    /// Horizon `T`.
    pub horizon: f64,
    pub dt: f64,
}

/// One grid axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X(usize),
    Y(usize),
}

/// Length, stride and spacing of one axis in the flat node layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisInfo {
    pub len: usize,
    pub stride: usize,
    pub spacing: f64,
}

impl AxisInfo {
    #[inline]
    pub fn position(&self, node: usize) -> usize {
        (node / self.stride) % self.len
    }
}

/// Nodal values of the major value function φ.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }
}

/// Nodal values of the crowd value vector U, component-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdField {
    pub k: usize,
    pub values: Vec<f64>,
}

impl CrowdField {
    pub fn zeros(k: usize, nodes: usize) -> Self {
        CrowdField {
            k,
            values: vec![0.0; k * nodes],
        }
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.nodes();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn at(&self, node: usize) -> Vec<f64> {
        let n = self.nodes();
        (0..self.k).map(|c| self.values[c * n + node]).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }
}

/// `max |v|`; NaN propagates.
pub fn sup_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m: f64, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v.abs()) })
}

/// How the `-νΔ_y` term is advanced in time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffusionTreatment {
    Explicit,
    Implicit,
}

impl GridSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_min: Vec<f64>,
        x_max: Vec<f64>,
        n_x: Vec<usize>,
        y_min: Vec<f64>,
        y_max: Vec<f64>,
        n_y: Vec<usize>,
        horizon: f64,
        dt: f64,
    ) -> Self {
        GridSpec {
            x_min,
            x_max,
            n_x,
            y_min,
            y_max,
            n_y,
            horizon,
            dt,
        }
    }

    pub fn k(&self) -> usize {
        self.n_x.len()
    }

    pub fn d(&self) -> usize {
        self.n_y.len()
    }

    pub fn node_count(&self) -> usize {
        self.n_x.iter().chain(self.n_y.iter()).product()
    }

    pub fn x_spacing(&self, i: usize) -> f64 {
        (self.x_max[i] - self.x_min[i]) / (self.n_x[i] - 1) as f64
    }

    pub fn y_spacing(&self, j: usize) -> f64 {
        (self.y_max[j] - self.y_min[j]) / (self.n_y[j] - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_x.len();
        let d = self.n_y.len();
        if k == 0 {
            return Err(Error::validation("n_x", "at least one x-dimension is required"));
        }
        if d == 0 {
            return Err(Error::validation("n_y", "at least one y-dimension is required"));
        }
        if self.x_min.len() != k || self.x_max.len() != k {
            return Err(Error::validation("x_min/x_max", "length must match n_x"));
        }
        if self.y_min.len() != d || self.y_max.len() != d {
            return Err(Error::validation("y_min/y_max", "length must match n_y"));
        }
        for i in 0..k {
            if !(self.x_min[i] >= 0.0 && self.x_min[i] < self.x_max[i]) {
                return Err(Error::validation(
                    "x_min/x_max",
                    format!("need 0 <= x_min < x_max in dimension {i}"),
                ));
            }
            if self.n_x[i] < 2 {
                return Err(Error::validation("n_x", "at least 2 nodes per x-dimension"));
            }
        }
        for j in 0..d {
            if !(self.y_min[j] < self.y_max[j]) {
                return Err(Error::validation("y_min/y_max", format!("need y_min < y_max in dimension {j}")));
            }
            if self.n_y[j] < 3 {
                return Err(Error::validation("n_y", "at least 3 nodes per y-dimension"));
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("T", "horizon must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::validation("dt", "time step must be positive"));
        }
        Ok(())
    }

    /// Axis descriptors in layout order: x axes first, then y axes.
    pub fn axes(&self) -> Vec<AxisInfo> {
        let lens: Vec<usize> = self.n_x.iter().chain(self.n_y.iter()).copied().collect();
        let mut stride = 1;
        let mut strides = vec![0; lens.len()];
        for m in (0..lens.len()).rev() {
            strides[m] = stride;
            stride *= lens[m];
        }
        let k = self.k();
        (0..lens.len())
            .map(|m| AxisInfo {
                len: lens[m],
                stride: strides[m],
                spacing: if m < k { self.x_spacing(m) } else { self.y_spacing(m - k) },
            })
            .collect()
    }

    pub fn axis(&self, axis: Axis) -> AxisInfo {
        let axes = self.axes();
        match axis {
            Axis::X(i) => axes[i],
            Axis::Y(j) => axes[self.k() + j],
        }
    }

    /// Coordinates of every node, node-major, `k + d` values per node.
    pub fn coordinates(&self) -> Vec<f64> {
        let axes = self.axes();
        let k = self.k();
        let dims = axes.len();
        let n = self.node_count();
        let mut out = vec![0.0; n * dims];
        out.par_chunks_mut(dims).enumerate().for_each(|(node, c)| {
            for (m, ax) in axes.iter().enumerate() {
                let i = ax.position(node) as f64;
                c[m] = if m < k {
                    self.x_min[m] + i * ax.spacing
                } else {
                    self.y_min[m - k] + i * ax.spacing
                };
            }
        });
        out
    }

    pub fn node_coordinates(&self, node: usize) -> (Vec<f64>, Vec<f64>) {
        let axes = self.axes();
        let k = self.k();
        let x = (0..k)
            .map(|i| self.x_min[i] + axes[i].position(node) as f64 * axes[i].spacing)
            .collect();
        let y = (0..self.d())
            .map(|j| self.y_min[j] + axes[k + j].position(node) as f64 * axes[k + j].spacing)
            .collect();
        (x, y)
    }

    /// Flat node index of a multi-index given in layout order.
    pub fn node_index(&self, multi: &[usize]) -> usize {
        self.axes().iter().zip(multi).map(|(ax, i)| ax.stride * i).sum()
    }

    /// Number of time steps to reach the horizon; the last step is shortened
    /// when `T/dt` is not an integer.
    pub fn step_count(&self) -> usize {
        let ratio = self.horizon / self.dt;
        let rounded = ratio.round();
        if (ratio - rounded).abs() <= 1e-9 * ratio.max(1.0) {
            rounded as usize
        } else {
            ratio.ceil() as usize
        }
    }

    /// Time at the end of step `step` (1-based).
    pub fn time_at(&self, step: usize) -> f64 {
        if step >= self.step_count() {
            self.horizon
        } else {
            step as f64 * self.dt
        }
    }

    /// Halve every spacing (`n -> 2n - 1`) and the time step.
    pub fn refined(&self) -> GridSpec {
        GridSpec {
            n_x: self.n_x.iter().map(|n| 2 * n - 1).collect(),
            n_y: self.n_y.iter().map(|n| 2 * n - 1).collect(),
            dt: 0.5 * self.dt,
            ..self.clone()
        }
    }

    /// Index of coarse node `node` of `self` on the refined grid `fine`.
    pub fn coarse_to_fine(&self, fine: &GridSpec, node: usize) -> usize {
        let coarse_axes = self.axes();
        let fine_axes = fine.axes();
        coarse_axes
            .iter()
            .zip(fine_axes.iter())
            .map(|(c, f)| 2 * c.position(node) * f.stride)
            .sum()
    }
}

/// Upwind difference along `axis` at `node`: backward for positive drift,
/// forward for negative drift, central for zero drift, one-sided at the two
/// boundary nodes regardless of sign.
#[inline]
pub fn upwind_at(values: &[f64], node: usize, axis: &AxisInfo, drift: f64) -> f64 {
    let i = axis.position(node);
    let s = axis.stride;
    let h = axis.spacing;
    if i == 0 {
        (values[node + s] - values[node]) / h
    } else if i + 1 == axis.len {
        (values[node] - values[node - s]) / h
    } else if drift > 0.0 {
        (values[node] - values[node - s]) / h
    } else if drift < 0.0 {
        (values[node + s] - values[node]) / h
    } else {
        (values[node + s] - values[node - s]) / (2.0 * h)
    }
}

/// Difference used by the transport stages of the solvers: [`upwind_at`] in
/// the interior and at outflow boundary nodes, zero at inflow boundary nodes
/// (drift pointing into the box), where the truncated problem has no data
/// and a one-sided difference would be downwind.
#[inline]
pub fn transport_at(values: &[f64], node: usize, axis: &AxisInfo, drift: f64) -> f64 {
    let i = axis.position(node);
    if (i == 0 && drift > 0.0) || (i + 1 == axis.len && drift < 0.0) {
        0.0
    } else {
        upwind_at(values, node, axis, drift)
    }
}

/// Central difference with mirrored ghost nodes: zero on the boundary.
#[inline]
pub fn central_at(values: &[f64], node: usize, axis: &AxisInfo) -> f64 {
    let i = axis.position(node);
    if i == 0 || i + 1 == axis.len {
        0.0
    } else {
        (values[node + axis.stride] - values[node - axis.stride]) / (2.0 * axis.spacing)
    }
}

/// Second difference with a homogeneous Neumann (mirror) closure.
#[inline]
pub fn second_difference_at(values: &[f64], node: usize, axis: &AxisInfo) -> f64 {
    let i = axis.position(node);
    let s = axis.stride;
    let h2 = axis.spacing * axis.spacing;
    let v = values[node];
    if i == 0 {
        2.0 * (values[node + s] - v) / h2
    } else if i + 1 == axis.len {
        2.0 * (values[node - s] - v) / h2
    } else {
        (values[node - s] - 2.0 * v + values[node + s]) / h2
    }
}

/// Upwind gradient of a nodal field along `axis` for a per-node drift.
pub fn upwind_grad(values: &[f64], grid: &GridSpec, axis: Axis, drift: &[f64]) -> Vec<f64> {
    let info = grid.axis(axis);
    (0..values.len())
        .into_par_iter()
        .map(|n| upwind_at(values, n, &info, drift[n]))
        .collect()
}

/// `Δ_y` of a nodal field with Neumann closure; x axes are untouched.
pub fn laplacian_y(values: &[f64], grid: &GridSpec) -> Vec<f64> {
    let axes = grid.axes();
    let y_axes = &axes[grid.k()..];
    (0..values.len())
        .into_par_iter()
        .map(|n| y_axes.iter().map(|ax| second_difference_at(values, n, ax)).sum())
        .collect()
}

/// Transport speeds sampled over the grid: `sup|A_i|` per x-dimension and
/// `sup|α_j|` per y-dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransportBounds {
    pub drift: Vec<f64>,
    pub control: Vec<f64>,
}

impl TransportBounds {
    /// `Σ_i sup|A_i|/h_xi + Σ_j sup|α_j|/h_yj`.
    pub fn rate(&self, grid: &GridSpec) -> f64 {
        let a: f64 = self.drift.iter().enumerate().map(|(i, b)| b / grid.x_spacing(i)).sum();
        let c: f64 = self.control.iter().enumerate().map(|(j, b)| b / grid.y_spacing(j)).sum();
        a + c
    }
}

/// Largest admissible time step for the explicit part of the scheme. With
/// explicit diffusion the heat stability term `2νΣ_j 1/h_yj²` is added; when
/// nothing constrains the step the horizon is returned.
pub fn cfl_max_dt(nu: f64, grid: &GridSpec, bounds: &TransportBounds, diffusion: DiffusionTreatment) -> f64 {
    let mut rate = bounds.rate(grid);
    if diffusion == DiffusionTreatment::Explicit {
        rate += 2.0 * nu * (0..grid.d()).map(|j| 1.0 / grid.y_spacing(j).powi(2)).sum::<f64>();
    }
    if rate > 0.0 {
        (1.0 / rate).min(grid.horizon)
    } else {
        grid.horizon
    }
}

/// Thomas solve of one line of `(σ - κΔ)z = r` with mirror closure, where
/// `kappa = dt·ν/h²`. `work` must be as long as the line.
pub(crate) fn solve_line(rhs: &[f64], kappa: f64, sigma: f64, out: &mut [f64], work: &mut [f64]) {
    let n = rhs.len();
    let diag = sigma + 2.0 * kappa;
    let sub = |m: usize| if m + 1 == n { -2.0 * kappa } else { -kappa };
    let sup = |m: usize| if m == 0 { -2.0 * kappa } else { -kappa };
    // forward sweep
    let mut denom = diag;
    work[0] = sup(0) / denom;
    out[0] = rhs[0] / denom;
    for m in 1..n {
        denom = diag - sub(m) * work[m - 1];
        work[m] = if m + 1 < n { sup(m) / denom } else { 0.0 };
        out[m] = (rhs[m] - sub(m) * out[m - 1]) / denom;
    }
    for m in (0..n - 1).rev() {
        out[m] -= work[m] * out[m + 1];
    }
}

/// Row `m` of `(σ - κΔ)z - r` for the line operator of [`solve_line`].
#[inline]
pub(crate) fn line_residual(z: &[f64], rhs: &[f64], kappa: f64, sigma: f64, m: usize) -> f64 {
    let n = z.len();
    let lap = if m == 0 {
        2.0 * (z[1] - z[0])
    } else if m + 1 == n {
        2.0 * (z[m - 1] - z[m])
    } else {
        z[m - 1] - 2.0 * z[m] + z[m + 1]
    };
    sigma * z[m] - kappa * lap - rhs[m]
}

/// Projected Gauss–Seidel for the line complementarity problem
/// `z ≤ ψ`, `(σ - κΔ)z - r ≤ 0`, with equality in one of the two at every
/// node. Starts from the clipped unconstrained solution.
pub(crate) fn solve_line_obstacle(
    rhs: &[f64],
    obstacle: &[f64],
    kappa: f64,
    sigma: f64,
    out: &mut [f64],
    work: &mut [f64],
) {
    let n = rhs.len();
    solve_line(rhs, kappa, sigma, out, work);
    let mut any_clipped = false;
    for m in 0..n {
        if out[m] > obstacle[m] {
            out[m] = obstacle[m];
            any_clipped = true;
        }
    }
    if !any_clipped {
        return;
    }
    let diag = sigma + 2.0 * kappa;
    for _ in 0..100_000 {
        let mut change: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for m in 0..n {
            let off = if m == 0 {
                -2.0 * kappa * out[1]
            } else if m + 1 == n {
                -2.0 * kappa * out[m - 1]
            } else {
                -kappa * (out[m - 1] + out[m + 1])
            };
            let gs = (rhs[m] - off) / diag;
            let next = gs.min(obstacle[m]);
            change = change.max((next - out[m]).abs());
            scale = scale.max(next.abs());
            out[m] = next;
        }
        if change <= 4.0 * f64::EPSILON * scale {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_grid(values: usize, h: f64) -> GridSpec {
        GridSpec::new(
            vec![0.0],
            vec![1.0],
            vec![2],
            vec![0.0],
            vec![h * (values - 1) as f64],
            vec![values],
            1.0,
            0.01,
        )
    }

    #[test]
    fn upwind_picks_side_by_drift_sign() {
        let ax = AxisInfo {
            len: 3,
            stride: 1,
            spacing: 0.5,
        };
        let v = [0.0, 1.0, 4.0];
        assert_eq!(upwind_at(&v, 1, &ax, 1.0), 2.0);
        assert_eq!(upwind_at(&v, 1, &ax, -1.0), 6.0);
        assert_eq!(upwind_at(&v, 1, &ax, 0.0), 4.0);
        // boundaries are one-sided whatever the drift
        assert_eq!(upwind_at(&v, 0, &ax, 1.0), 2.0);
        assert_eq!(upwind_at(&v, 2, &ax, -1.0), 6.0);
    }

    #[test]
    fn upwind_of_constant_is_zero() {
        let grid = GridSpec::new(vec![0.0], vec![1.0], vec![5], vec![0.0], vec![1.0], vec![4], 1.0, 0.1);
        let v = vec![2.5; grid.node_count()];
        let drift: Vec<f64> = (0..v.len()).map(|n| (n as f64 - 7.0) * 0.3).collect();
        for axis in [Axis::X(0), Axis::Y(0)] {
            assert!(upwind_grad(&v, &grid, axis, &drift).iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn second_difference_matches_hand_value() {
        let grid = line_grid(3, 1.0);
        // two x nodes, three y nodes each
        let v = vec![0.0, 1.0, 4.0, 0.0, 1.0, 4.0];
        let lap = laplacian_y(&v, &grid);
        assert_eq!(lap[1], 2.0);
        assert_eq!(lap[4], 2.0);
        // mirror closure at the ends
        assert_eq!(lap[0], 2.0);
        assert_eq!(lap[2], -6.0);
    }

    #[test]
    fn laplacian_of_quadratic_is_two() {
        let grid = GridSpec::new(vec![0.0], vec![1.0], vec![2], vec![-1.0], vec![1.0], vec![21], 1.0, 0.1);
        let coords = grid.coordinates();
        let v: Vec<f64> = coords.chunks(2).map(|c| c[1] * c[1]).collect();
        let lap = laplacian_y(&v, &grid);
        let ax = grid.axis(Axis::Y(0));
        for n in 0..v.len() {
            let i = ax.position(n);
            if i > 0 && i + 1 < ax.len {
                assert!((lap[n] - 2.0).abs() < 1e-9, "node {n}: {}", lap[n]);
            }
        }
    }

    #[test]
    fn cfl_examples() {
        let grid = GridSpec::new(vec![0.0], vec![1.0], vec![11], vec![0.0], vec![1.0], vec![11], 2.0, 0.01);
        let bounds = TransportBounds {
            drift: vec![0.1],
            control: vec![0.1],
        };
        let dt = cfl_max_dt(0.05, &grid, &bounds, DiffusionTreatment::Implicit);
        assert!((dt - 0.5).abs() < 1e-12);

        let zero = TransportBounds {
            drift: vec![0.0],
            control: vec![0.0],
        };
        assert_eq!(cfl_max_dt(0.05, &grid, &zero, DiffusionTreatment::Implicit), 2.0);

        // heat-only explicit bound 1/(2ν/h²) with h = 0.1, ν = 0.05
        let dt = cfl_max_dt(0.05, &grid, &zero, DiffusionTreatment::Explicit);
        assert!((dt - 0.1).abs() < 1e-12, "{dt}");
    }

    #[test]
    fn thomas_solve_inverts_operator() {
        let rhs = [1.0, -2.0, 0.5, 3.0, 0.0];
        let mut out = [0.0; 5];
        let mut work = [0.0; 5];
        solve_line(&rhs, 0.7, 1.3, &mut out, &mut work);
        for m in 0..5 {
            assert!(line_residual(&out, &rhs, 0.7, 1.3, m).abs() < 1e-13);
        }
    }

    #[test]
    fn obstacle_line_solve_is_complementary() {
        let rhs = [0.0, 0.4, 1.2, 1.5, 0.2, -0.3, 0.1];
        let psi = [1.0, 0.6, 0.6, 0.6, 0.6, 1.0, 1.0];
        let mut out = [0.0; 7];
        let mut work = [0.0; 7];
        solve_line_obstacle(&rhs, &psi, 2.0, 1.0, &mut out, &mut work);
        for m in 0..7 {
            let r = line_residual(&out, &rhs, 2.0, 1.0, m);
            assert!(out[m] <= psi[m]);
            assert!(r <= 1e-12, "row {m}: {r}");
            assert!((out[m] - psi[m]).max(r).abs() < 1e-12, "row {m}");
        }
        assert!(out.iter().zip(psi.iter()).any(|(z, p)| z == p));
    }

    #[test]
    fn refinement_maps_coarse_nodes_onto_fine_nodes() {
        let coarse = GridSpec::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![3, 4], vec![-1.0], vec![1.0], vec![5], 1.0, 0.1);
        let fine = coarse.refined();
        assert_eq!(fine.n_x, vec![5, 7]);
        assert_eq!(fine.dt, 0.05);
        for node in 0..coarse.node_count() {
            let f = coarse.coarse_to_fine(&fine, node);
            assert_eq!(coarse.node_coordinates(node), fine.node_coordinates(f));
        }
    }

    #[test]
    fn step_count_handles_non_integer_ratio() {
        let mut grid = line_grid(3, 1.0);
        grid.dt = 0.3;
        assert_eq!(grid.step_count(), 4);
        assert_eq!(grid.time_at(4), 1.0);
        grid.dt = 0.001;
        assert_eq!(grid.step_count(), 1000);
    }
}
