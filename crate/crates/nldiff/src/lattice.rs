//! Uniform lattice geometry: grids, scalar fields, hole rasterization,
//! connectivity classification, and discrete integration / radial statistics.

use std::sync::Arc;

use crate::error::{NldError, Result};

/// Uniform cubic lattice on the box `[-extent, extent]^dim` with an odd number
/// of points per axis so that the origin is a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    points: usize,
    extent: f64,
    spacing: f64,
}

impl Grid {
    /// Validated constructor for physics runs: odd `points >= 17`.
    pub fn build(dim: usize, points: usize, extent: f64) -> Result<Grid> {
        if points % 2 == 0 {
            return Err(NldError::Config(format!(
                "grid.points must be odd so the origin is a node (got {points})"
            )));
        }
        if points < 17 {
            return Err(NldError::Config(format!(
                "grid.points must be >= 17 for physics runs (got {points})"
            )));
        }
        Grid::custom(dim, points, extent)
    }

    /// Unvalidated-size constructor for oracle-scale grids (dense matrix
    /// exponential tests and the like). Still requires sane dimension and a
    /// positive extent.
    pub fn custom(dim: usize, points: usize, extent: f64) -> Result<Grid> {
        if dim == 0 || dim > 3 {
            return Err(NldError::Config(format!(
                "grid.dimension must be 1..=3 (got {dim})"
            )));
        }
        if !(extent > 0.0) {
            return Err(NldError::Config(format!(
                "grid.extent must be positive (got {extent})"
            )));
        }
        if points < 2 {
            return Err(NldError::Config("grid.points must be >= 2".into()));
        }
        let spacing = 2.0 * extent / (points - 1) as f64;
        Ok(Grid {
            dim,
            points,
            extent,
            spacing,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    /// Estimated bytes for one f64 field on this grid.
    pub fn memory_estimate(&self) -> usize {
        self.node_count() * std::mem::size_of::<f64>()
    }

    /// h^dim, the volume element of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    /// Coordinate of axis index `i`: `(i - center) * h`. The center index maps
    /// to exactly 0.0 for odd `points`.
    pub fn axis_coord(&self, i: usize) -> f64 {
        let c = (self.points - 1) as f64 / 2.0;
        (i as f64 - c) * self.spacing
    }

    /// Per-axis coordinates, cached once per caller.
    pub fn axis_coords(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.axis_coord(i)).collect()
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> [usize; 3] {
        let p = self.points;
        match self.dim {
            1 => [1, 0, 0],
            2 => [p, 1, 0],
            _ => [p * p, p, 1],
        }
    }

    /// Decompose a flat index into per-axis indices.
    pub fn unflatten(&self, mut flat: usize) -> [usize; 3] {
        let p = self.points;
        let mut idx = [0usize; 3];
        for d in (0..self.dim).rev() {
            idx[d] = flat % p;
            flat /= p;
        }
        idx
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        let mut flat = 0usize;
        for d in 0..self.dim {
            flat = flat * self.points + idx[d];
        }
        flat
    }

    /// |x|^2 of the node at `idx`.
    pub fn radius_sq(&self, idx: &[usize; 3]) -> f64 {
        let mut s = 0.0;
        for d in 0..self.dim {
            let x = self.axis_coord(idx[d]);
            s += x * x;
        }
        s
    }

    /// Distance (in node layers) from the nearest box face.
    pub fn face_layers(&self, idx: &[usize; 3]) -> usize {
        let c = self.points - 1;
        let mut q = usize::MAX;
        for d in 0..self.dim {
            q = q.min(idx[d]).min(c - idx[d]);
        }
        q
    }
}

/// Scalar lattice function. All physical fields (u, phi, psi, omega, Gamma)
/// are carried by this type.
#[derive(Debug, Clone)]
pub struct Field {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
    pub time_tag: Option<f64>,
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>) -> Field {
        Field {
            grid: Arc::clone(grid),
            values: vec![0.0; grid.node_count()],
            time_tag: None,
        }
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Field {
        Field {
            grid: Arc::clone(grid),
            values: vec![c; grid.node_count()],
            time_tag: None,
        }
    }

    /// Evaluate `f(x)` at every node center.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Field {
        let coords = grid.axis_coords();
        let n = grid.node_count();
        let mut values = Vec::with_capacity(n);
        let mut x = [0.0f64; 3];
        for flat in 0..n {
            let idx = grid.unflatten(flat);
            for d in 0..grid.dim() {
                x[d] = coords[idx[d]];
            }
            values.push(f(&x[..grid.dim()]));
        }
        Field {
            grid: Arc::clone(&Arc::clone(grid)),
            values,
            time_tag: None,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid.as_ref() != other.grid.as_ref() {
            return Err(NldError::GridMismatch(
                "fields live on different grids".into(),
            ));
        }
        Ok(())
    }
}

/// Hole primitives. A hole set is the union of its primitives; composite
/// shapes (e.g. a hollow shell) are built from overlapping boxes.
#[derive(Debug, Clone, PartialEq)]
pub enum HolePrimitive {
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Box {
        center: Vec<f64>,
        half_widths: Vec<f64>,
    },
}

impl HolePrimitive {
    fn contains(&self, x: &[f64]) -> bool {
        match self {
            HolePrimitive::Ball { center, radius } => {
                let mut s = 0.0;
                for (xi, ci) in x.iter().zip(center) {
                    s += (xi - ci) * (xi - ci);
                }
                s < radius * radius
            }
            HolePrimitive::Box {
                center,
                half_widths,
            } => x
                .iter()
                .zip(center)
                .zip(half_widths)
                .all(|((xi, ci), hw)| (xi - ci).abs() < *hw),
        }
    }

    /// Per-axis reach |c_d| + size_d, used for the margin check.
    fn axis_reach(&self, d: usize) -> f64 {
        match self {
            HolePrimitive::Ball { center, radius } => center[d].abs() + radius,
            HolePrimitive::Box {
                center,
                half_widths,
            } => center[d].abs() + half_widths[d],
        }
    }

    /// Largest |x| over the primitive (circumradius about the origin).
    pub fn circumradius(&self) -> f64 {
        match self {
            HolePrimitive::Ball { center, radius } => {
                center.iter().map(|c| c * c).sum::<f64>().sqrt() + radius
            }
            HolePrimitive::Box {
                center,
                half_widths,
            } => center
                .iter()
                .zip(half_widths)
                .map(|(c, h)| (c.abs() + h) * (c.abs() + h))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// The union of hole primitives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HoleSet {
    pub primitives: Vec<HolePrimitive>,
}

impl HoleSet {
    pub fn empty() -> HoleSet {
        HoleSet::default()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.primitives.iter().any(|p| p.contains(x))
    }

    /// Largest |x| over all primitives; 0 when empty.
    pub fn circumradius(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.circumradius())
            .fold(0.0, f64::max)
    }

    /// Every primitive must sit inside the box with margin at least
    /// `2 * support_radius` on every axis.
    pub fn check_margin(&self, grid: &Grid, support_radius: f64) -> Result<()> {
        for (k, p) in self.primitives.iter().enumerate() {
            for d in 0..grid.dim() {
                let reach = p.axis_reach(d);
                if reach > grid.extent() - 2.0 * support_radius {
                    return Err(NldError::Geometry(format!(
                        "hole primitive {k} reaches {reach:.3} on axis {d}; it must stay \
                         inside the box with margin >= 2 x support radius \
                         ({:.3} allowed for extent {:.3})",
                        grid.extent() - 2.0 * support_radius,
                        grid.extent()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-node classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum NodeClass {
    Hole = 0,
    Exterior = 1,
    OuterPad = 2,
}

/// Connected-component summary produced by [`components`].
#[derive(Debug, Clone)]
pub struct ComponentInfo {
    pub id: u32,
    pub node_count: usize,
    /// True when the component reaches the outer pad ring, i.e. is connected
    /// to infinity through kernel-range links.
    pub unbounded: bool,
}

/// Node classification plus (after [`components`]) connectivity labels.
#[derive(Debug, Clone)]
pub struct DomainMask {
    pub grid: Arc<Grid>,
    pub class: Vec<NodeClass>,
    /// Component id per non-hole node; `u32::MAX` on hole nodes or before
    /// labeling.
    pub component_id: Vec<u32>,
    pub components: Vec<ComponentInfo>,
    pub unbounded_component_id: Option<u32>,
}

impl DomainMask {
    /// Build a mask from an arbitrary per-node classifier. Used for
    /// oracle-scale tests where the rasterization margins cannot hold.
    pub fn from_classes(grid: &Arc<Grid>, classify: impl Fn(&[f64]) -> NodeClass) -> DomainMask {
        let coords = grid.axis_coords();
        let n = grid.node_count();
        let mut class = Vec::with_capacity(n);
        let mut x = [0.0f64; 3];
        for flat in 0..n {
            let idx = grid.unflatten(flat);
            for d in 0..grid.dim() {
                x[d] = coords[idx[d]];
            }
            class.push(classify(&x[..grid.dim()]));
        }
        DomainMask {
            grid: Arc::clone(grid),
            class,
            component_id: vec![u32::MAX; n],
            components: Vec::new(),
            unbounded_component_id: None,
        }
    }

    pub fn is_hole(&self, flat: usize) -> bool {
        self.class[flat] == NodeClass::Hole
    }

    pub fn count(&self, c: NodeClass) -> usize {
        self.class.iter().filter(|&&x| x == c).count()
    }

    /// Zero the field on hole nodes, in place.
    pub fn zero_holes(&self, f: &mut Field) {
        for (v, c) in f.values.iter_mut().zip(&self.class) {
            if *c == NodeClass::Hole {
                *v = 0.0;
            }
        }
    }

    /// Mass currently sitting in the outer pad ring (leakage diagnostic).
    pub fn pad_mass(&self, f: &Field) -> f64 {
        let mut sum = NeumaierSum::new();
        for (v, c) in f.values.iter().zip(&self.class) {
            if *c == NodeClass::OuterPad {
                sum.add(*v);
            }
        }
        sum.value() * self.grid.cell_volume()
    }
}

/// Classify nodes into hole / exterior / outer pad.
///
/// A node is a hole node iff its center lies inside some primitive; the outer
/// pad is the ring of nodes within one support radius of the box faces.
pub fn rasterize(holes: &HoleSet, grid: &Arc<Grid>, support_radius: f64) -> Result<DomainMask> {
    if !holes.is_empty() {
        holes.check_margin(grid, support_radius)?;
    }
    let pad_layers = (support_radius / grid.spacing()).ceil() as usize;
    let coords = grid.axis_coords();
    let n = grid.node_count();
    let mut class = Vec::with_capacity(n);
    let mut x = [0.0f64; 3];
    for flat in 0..n {
        let idx = grid.unflatten(flat);
        for d in 0..grid.dim() {
            x[d] = coords[idx[d]];
        }
        let c = if holes.contains(&x[..grid.dim()]) {
            NodeClass::Hole
        } else if ((grid.face_layers(&idx) as f64) * grid.spacing()) < support_radius {
            NodeClass::OuterPad
        } else {
            NodeClass::Exterior
        };
        class.push(c);
    }
    let _ = pad_layers;
    Ok(DomainMask {
        grid: Arc::clone(grid),
        class,
        component_id: vec![u32::MAX; n],
        components: Vec::new(),
        unbounded_component_id: None,
    })
}

/// All nonzero lattice offsets `o` with `|o| * h < radius`, sorted
/// lexicographically (a fixed deterministic order).
pub fn offsets_within(dim: usize, spacing: f64, radius: f64) -> Vec<[i32; 3]> {
    let m = ((radius / spacing).ceil() as i32).max(0);
    let mut out = Vec::new();
    let r2 = (radius / spacing) * (radius / spacing);
    let range = |d: usize| -> std::ops::RangeInclusive<i32> {
        if d < dim {
            -m..=m
        } else {
            0..=0
        }
    };
    for i in range(0) {
        for j in range(1) {
            for k in range(2) {
                let o = [i, j, k];
                let n2 = (i * i + j * j + k * k) as f64;
                if n2 > 0.0 && n2 < r2 {
                    out.push(o);
                }
            }
        }
    }
    out
}

/// Partition the non-hole nodes into connected components; two nodes are
/// linked iff their distance is below `interaction_radius`. The component
/// that touches the outer pad ring is flagged unbounded.
pub fn components(mask: &mut DomainMask, interaction_radius: f64) -> Result<()> {
    let grid = Arc::clone(&mask.grid);
    let offs = offsets_within(grid.dim(), grid.spacing(), interaction_radius);
    let p = grid.points_per_axis() as i64;
    let n = grid.node_count();
    let mut labels = vec![u32::MAX; n];
    let mut infos: Vec<ComponentInfo> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();

    for start in 0..n {
        if mask.class[start] == NodeClass::Hole || labels[start] != u32::MAX {
            continue;
        }
        let id = infos.len() as u32;
        let mut count = 0usize;
        let mut touches_pad = false;
        labels[start] = id;
        stack.push(start);
        while let Some(flat) = stack.pop() {
            count += 1;
            if mask.class[flat] == NodeClass::OuterPad {
                touches_pad = true;
            }
            let idx = grid.unflatten(flat);
            for o in &offs {
                let mut ok = true;
                let mut nflat: i64 = 0;
                for d in 0..grid.dim() {
                    let ni = idx[d] as i64 + o[d] as i64;
                    if ni < 0 || ni >= p {
                        ok = false;
                        break;
                    }
                    nflat = nflat * p + ni;
                }
                if !ok {
                    continue;
                }
                let nflat = nflat as usize;
                if labels[nflat] == u32::MAX && mask.class[nflat] != NodeClass::Hole {
                    labels[nflat] = id;
                    stack.push(nflat);
                }
            }
        }
        infos.push(ComponentInfo {
            id,
            node_count: count,
            unbounded: touches_pad,
        });
    }

    let unbounded: Vec<u32> = infos.iter().filter(|c| c.unbounded).map(|c| c.id).collect();
    mask.component_id = labels;
    mask.unbounded_component_id = unbounded.first().copied();
    mask.components = infos;
    Ok(())
}

/// Compensated (Neumaier) summation with a fixed sequential order, so that
/// reductions are deterministic regardless of thread count.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Discrete integral `h^N * sum(f)` with compensated summation.
pub fn integrate(f: &Field) -> f64 {
    let mut s = NeumaierSum::new();
    for &v in &f.values {
        s.add(v);
    }
    s.value() * f.grid.cell_volume()
}

/// Discrete weighted mass `h^N * sum(u_i w_i)`, compensated, deterministic
/// order. Symmetric in its arguments exactly.
pub fn weighted_mass(u: &Field, w: &Field) -> Result<f64> {
    u.same_grid(w)?;
    let mut s = NeumaierSum::new();
    for (&a, &b) in u.values.iter().zip(&w.values) {
        s.add(a * b);
    }
    Ok(s.value() * u.grid.cell_volume())
}

/// One radial bin of [`radial_profile`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialBin {
    pub r_mid: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

/// Bin the field by |x| with the given bin width; empty bins are omitted.
pub fn radial_profile(f: &Field, bin_width: f64) -> Result<Vec<RadialBin>> {
    if bin_width < f.grid.spacing() {
        return Err(NldError::Range(format!(
            "bin width {bin_width} is below the grid spacing {}",
            f.grid.spacing()
        )));
    }
    let grid = &f.grid;
    let max_r = grid.extent() * (grid.dim() as f64).sqrt();
    let nbins = (max_r / bin_width).ceil() as usize + 1;
    let mut sums = vec![NeumaierSum::new(); nbins];
    let mut maxs = vec![f64::NEG_INFINITY; nbins];
    let mut counts = vec![0usize; nbins];
    for (flat, &v) in f.values.iter().enumerate() {
        let idx = grid.unflatten(flat);
        let r = grid.radius_sq(&idx).sqrt();
        let b = ((r / bin_width) as usize).min(nbins - 1);
        sums[b].add(v);
        maxs[b] = maxs[b].max(v);
        counts[b] += 1;
    }
    Ok((0..nbins)
        .filter(|&b| counts[b] > 0)
        .map(|b| RadialBin {
            r_mid: (b as f64 + 0.5) * bin_width,
            mean: sums[b].value() / counts[b] as f64,
            max: maxs[b],
            count: counts[b],
        })
        .collect())
}
