//! Scattered quotes to grid: Delaunay triangulation in (moneyness, maturity)
//! and a Clough-Tocher piecewise-cubic C1 interpolant. Knots outside the
//! convex hull take the nearest quote's value.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use delaunator::{triangulate, Point, EMPTY};
use nalgebra::{DMatrix, DVector};

use super::{KnotAxes, Series, VolSurfaceGrid, GRID_CELLS, VOL_MAX, VOL_MIN};
use crate::error::DataError;

pub const MIN_QUOTES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct OptionQuote {
    pub date: NaiveDate,
    pub strike: f64,
    /// Years to maturity.
    pub maturity: f64,
    pub spot: f64,
    pub rate: f64,
    pub implied_vol: f64,
}

impl OptionQuote {
    pub fn moneyness(&self) -> f64 {
        self.strike / self.spot
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |message: String| {
            Err(DataError::Ingest {
                date: self.date,
                message,
            })
        };
        if !(0.001..=5.0).contains(&self.implied_vol) {
            return fail(format!("implied vol {} outside [0.001, 5]", self.implied_vol));
        }
        if !(self.maturity > 0.0 && self.maturity <= 3.0) {
            return fail(format!("maturity {} outside (0, 3]", self.maturity));
        }
        if !(self.strike > 0.0 && self.spot > 0.0 && self.rate.is_finite()) {
            return fail(format!(
                "strike {}, spot {}, rate {} invalid",
                self.strike, self.spot, self.rate
            ));
        }
        Ok(())
    }
}

/// Interpolate one day's quotes onto the knots and clamp to the vol range.
pub fn interpolate_surface(quotes: &[OptionQuote], axes: &KnotAxes) -> Result<VolSurfaceGrid, DataError> {
    let date = quotes
        .first()
        .map(|q| q.date)
        .ok_or_else(|| DataError::Format("no quotes to interpolate".into()))?;
    let fail = |message: String| DataError::Ingest { date, message };
    for q in quotes {
        q.validate()?;
        if q.date != date {
            return Err(fail(format!("quote dated {} mixed into this day", q.date)));
        }
    }
    if quotes.len() < MIN_QUOTES {
        return Err(fail(format!("{} quotes, need at least {MIN_QUOTES}", quotes.len())));
    }

    // Average quotes that land on the same (m, tau).
    let mut merged: BTreeMap<(u64, u64), (f64, usize)> = BTreeMap::new();
    for q in quotes {
        let e = merged
            .entry((q.moneyness().to_bits(), q.maturity.to_bits()))
            .or_insert((0.0, 0));
        e.0 += q.implied_vol;
        e.1 += 1;
    }
    let (coords, values): (Vec<(f64, f64)>, Vec<f64>) = merged
        .into_iter()
        .map(|((m, t), (sum, n))| ((f64::from_bits(m), f64::from_bits(t)), sum / n as f64))
        .unzip();

    let interp = CloughTocher::new(&coords, values).map_err(fail)?;
    let mut out = Vec::with_capacity(GRID_CELLS);
    for &m in &axes.moneyness {
        for &t in &axes.maturity {
            out.push(interp.eval_or_nearest(m, t).clamp(VOL_MIN, VOL_MAX));
        }
    }
    let n = quotes.len() as f64;
    let spot = quotes.iter().map(|q| q.spot).sum::<f64>() / n;
    let rate = quotes.iter().map(|q| q.rate).sum::<f64>() / n;
    VolSurfaceGrid::new(date, out, spot, rate)
}

/// Group quotes by date and interpolate each day.
pub fn ingest_quotes(quotes: &[OptionQuote], axes: &KnotAxes) -> Result<Series, DataError> {
    let mut by_day: BTreeMap<NaiveDate, Vec<OptionQuote>> = BTreeMap::new();
    for q in quotes {
        by_day.entry(q.date).or_default().push(q.clone());
    }
    let grids = by_day
        .values()
        .map(|day| interpolate_surface(day, axes))
        .collect::<Result<Vec<_>, _>>()?;
    Series::new(axes.clone(), grids)
}

/// Clough-Tocher interpolant over a Delaunay triangulation. Coordinates are
/// rescaled to the unit box of the data before triangulating.
pub(crate) struct CloughTocher {
    origin: (f64, f64),
    scale: (f64, f64),
    points: Vec<(f64, f64)>,
    values: Vec<f64>,
    grads: Vec<(f64, f64)>,
    triangles: Vec<[usize; 3]>,
    /// Neighbour across the edge opposite each vertex.
    neighbours: Vec<[Option<usize>; 3]>,
}

impl CloughTocher {
    pub(crate) fn new(coords: &[(f64, f64)], values: Vec<f64>) -> Result<Self, String> {
        if coords.len() < 3 {
            return Err(format!("{} distinct quote locations; degenerate geometry", coords.len()));
        }
        let (xmin, xmax) = min_max(coords.iter().map(|c| c.0));
        let (ymin, ymax) = min_max(coords.iter().map(|c| c.1));
        if !(xmax > xmin && ymax > ymin) {
            return Err("quotes are collinear in moneyness or maturity; degenerate geometry".into());
        }
        let origin = (xmin, ymin);
        let scale = (xmax - xmin, ymax - ymin);
        let points: Vec<(f64, f64)> = coords
            .iter()
            .map(|&(x, y)| ((x - origin.0) / scale.0, (y - origin.1) / scale.1))
            .collect();

        let tri = triangulate(&points.iter().map(|&(x, y)| Point { x, y }).collect::<Vec<_>>());
        if tri.triangles.is_empty() {
            return Err("quotes admit no triangulation; degenerate geometry".into());
        }
        let n_tri = tri.triangles.len() / 3;
        let triangles: Vec<[usize; 3]> = (0..n_tri)
            .map(|t| [tri.triangles[3 * t], tri.triangles[3 * t + 1], tri.triangles[3 * t + 2]])
            .collect();
        // Half-edge 3t + k runs from vertex k to vertex k + 1, so it is
        // opposite vertex k + 2.
        let neighbours = (0..n_tri)
            .map(|t| {
                let across = |e: usize| (tri.halfedges[e] != EMPTY).then(|| tri.halfedges[e] / 3);
                [across(3 * t + 1), across(3 * t + 2), across(3 * t)]
            })
            .collect();

        let mut interp = Self {
            origin,
            scale,
            points,
            values,
            grads: Vec::new(),
            triangles,
            neighbours,
        };
        interp.grads = interp.estimate_gradients();
        Ok(interp)
    }

    fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.points.len()];
        for t in &self.triangles {
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        adj[t[a]].insert(t[b]);
                    }
                }
            }
        }
        adj
    }

    /// Vertex gradients from an inverse-distance weighted quadratic fit over
    /// the Delaunay neighbours (second ring added when the first is small).
    fn estimate_gradients(&self) -> Vec<(f64, f64)> {
        let adj = self.adjacency();
        (0..self.points.len())
            .map(|i| {
                let mut ring = adj[i].clone();
                if ring.len() < 5 {
                    for j in adj[i].iter() {
                        ring.extend(adj[*j].iter().copied());
                    }
                    ring.remove(&i);
                }
                self.fit_gradient(i, &ring.into_iter().collect::<Vec<_>>())
            })
            .collect()
    }

    fn fit_gradient(&self, i: usize, ring: &[usize]) -> (f64, f64) {
        let (xi, yi) = self.points[i];
        let rows: Vec<(f64, f64, f64, f64)> = ring
            .iter()
            .map(|&j| {
                let (dx, dy) = (self.points[j].0 - xi, self.points[j].1 - yi);
                let w = 1.0 / (dx * dx + dy * dy).sqrt();
                (dx, dy, w, self.values[j] - self.values[i])
            })
            .collect();
        for quadratic in [true, false] {
            let cols = if quadratic { 5 } else { 2 };
            if rows.len() < cols {
                continue;
            }
            let a = DMatrix::from_fn(rows.len(), cols, |r, c| {
                let (dx, dy, w, _) = rows[r];
                w * [dx, dy, 0.5 * dx * dx, dx * dy, 0.5 * dy * dy][c]
            });
            let b = DVector::from_iterator(rows.len(), rows.iter().map(|&(_, _, w, df)| w * df));
            let svd = a.svd(true, true);
            let smax = svd.singular_values.max();
            if svd.singular_values.min() <= 1e-10 * smax {
                continue;
            }
            if let Ok(sol) = svd.solve(&b, 0.0) {
                return (sol[0], sol[1]);
            }
        }
        (0.0, 0.0)
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin.0) / self.scale.0, (y - self.origin.1) / self.scale.1)
    }

    fn barycentric(&self, t: usize, (x, y): (f64, f64)) -> Option<[f64; 3]> {
        let [p1, p2, p3] = self.triangles[t].map(|v| self.points[v]);
        let det = (p2.1 - p3.1) * (p1.0 - p3.0) + (p3.0 - p2.0) * (p1.1 - p3.1);
        if det.abs() < 1e-14 {
            return None;
        }
        let b1 = ((p2.1 - p3.1) * (x - p3.0) + (p3.0 - p2.0) * (y - p3.1)) / det;
        let b2 = ((p3.1 - p1.1) * (x - p3.0) + (p1.0 - p3.0) * (y - p3.1)) / det;
        Some([b1, b2, 1.0 - b1 - b2])
    }

    /// Value at (x, y) in data coordinates, or `None` outside the hull.
    pub(crate) fn eval(&self, x: f64, y: f64) -> Option<f64> {
        let p = self.to_local(x, y);
        if let Some(v) = self.points.iter().position(|q| (q.0 - p.0).abs() < 1e-12 && (q.1 - p.1).abs() < 1e-12) {
            return Some(self.values[v]);
        }
        (0..self.triangles.len()).find_map(|t| {
            let b = self.barycentric(t, p)?;
            b.iter().all(|&c| c >= -1e-12).then(|| self.eval_in(t, b))
        })
    }

    pub(crate) fn eval_or_nearest(&self, x: f64, y: f64) -> f64 {
        self.eval(x, y).unwrap_or_else(|| {
            let p = self.to_local(x, y);
            let d2 = |q: &(f64, f64)| (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2);
            let nearest = (0..self.points.len())
                .min_by(|&a, &b| d2(&self.points[a]).total_cmp(&d2(&self.points[b])))
                .expect("at least three points");
            self.values[nearest]
        })
    }

    /// Cubic Bezier patch evaluation on the Clough-Tocher split of triangle `t`.
    fn eval_in(&self, t: usize, b: [f64; 3]) -> f64 {
        let [v1, v2, v3] = self.triangles[t];
        let (p1, p2, p3) = (self.points[v1], self.points[v2], self.points[v3]);
        let e12 = (p2.0 - p1.0, p2.1 - p1.1);
        let e23 = (p3.0 - p2.0, p3.1 - p2.1);
        let e31 = (p1.0 - p3.0, p1.1 - p3.1);
        let dot = |g: (f64, f64), e: (f64, f64)| g.0 * e.0 + g.1 * e.1;
        let (g1, g2, g3) = (self.grads[v1], self.grads[v2], self.grads[v3]);
        let (f1, f2, f3) = (self.values[v1], self.values[v2], self.values[v3]);

        let df12 = dot(g1, e12);
        let df21 = -dot(g2, e12);
        let df23 = dot(g2, e23);
        let df32 = -dot(g3, e23);
        let df31 = dot(g3, e31);
        let df13 = -dot(g1, e31);

        let c3000 = f1;
        let c2100 = (df12 + 3.0 * c3000) / 3.0;
        let c2010 = (df13 + 3.0 * c3000) / 3.0;
        let c0300 = f2;
        let c1200 = (df21 + 3.0 * c0300) / 3.0;
        let c0210 = (df23 + 3.0 * c0300) / 3.0;
        let c0030 = f3;
        let c1020 = (df31 + 3.0 * c0030) / 3.0;
        let c0120 = (df32 + 3.0 * c0030) / 3.0;

        let c2001 = (c2100 + c2010 + c3000) / 3.0;
        let c0201 = (c1200 + c0300 + c0210) / 3.0;
        let c0021 = (c1020 + c0120 + c0030) / 3.0;

        // Cross-boundary derivative along the line to the neighbour's
        // centroid is kept linear on each edge.
        let mut g = [-0.5; 3];
        for (k, gk) in g.iter_mut().enumerate() {
            let Some(nb) = self.neighbours[t][k] else { continue };
            let [a, b_, c_] = self.triangles[nb].map(|v| self.points[v]);
            let centroid = ((a.0 + b_.0 + c_.0) / 3.0, (a.1 + b_.1 + c_.1) / 3.0);
            let Some(c) = self.barycentric(t, centroid) else { continue };
            *gk = match k {
                0 => (2.0 * c[2] + c[1] - 1.0) / (2.0 - 3.0 * c[2] - 3.0 * c[1]),
                1 => (2.0 * c[0] + c[2] - 1.0) / (2.0 - 3.0 * c[0] - 3.0 * c[2]),
                _ => (2.0 * c[1] + c[0] - 1.0) / (2.0 - 3.0 * c[1] - 3.0 * c[0]),
            };
        }

        let c0111 = (g[0] * (-c0300 + 3.0 * c0210 - 3.0 * c0120 + c0030)
            + (-c0300 + 2.0 * c0210 - c0120 + c0021 + c0201))
            / 2.0;
        let c1011 = (g[1] * (-c0030 + 3.0 * c1020 - 3.0 * c2010 + c3000)
            + (-c0030 + 2.0 * c1020 - c2010 + c2001 + c0021))
            / 2.0;
        let c1101 = (g[2] * (-c3000 + 3.0 * c2100 - 3.0 * c1200 + c0300)
            + (-c3000 + 2.0 * c2100 - c1200 + c2001 + c0201))
            / 2.0;

        let c1002 = (c1101 + c1011 + c2001) / 3.0;
        let c0102 = (c1101 + c0111 + c0201) / 3.0;
        let c0012 = (c1011 + c0111 + c0021) / 3.0;
        let c0003 = (c1002 + c0102 + c0012) / 3.0;

        // Coordinates on the sub-triangle: one of b1..b3 is zero.
        let minval = b[0].min(b[1]).min(b[2]);
        let (b1, b2, b3, b4) = (b[0] - minval, b[1] - minval, b[2] - minval, 3.0 * minval);

        b1.powi(3) * c3000
            + 3.0 * b1 * b1 * b2 * c2100
            + 3.0 * b1 * b1 * b3 * c2010
            + 3.0 * b1 * b1 * b4 * c2001
            + 3.0 * b1 * b2 * b2 * c1200
            + 6.0 * b1 * b2 * b4 * c1101
            + 3.0 * b1 * b3 * b3 * c1020
            + 6.0 * b1 * b3 * b4 * c1011
            + 3.0 * b1 * b4 * b4 * c1002
            + b2.powi(3) * c0300
            + 3.0 * b2 * b2 * b3 * c0210
            + 3.0 * b2 * b2 * b4 * c0201
            + 3.0 * b2 * b3 * b3 * c0120
            + 6.0 * b2 * b3 * b4 * c0111
            + 3.0 * b2 * b4 * b4 * c0102
            + b3.powi(3) * c0030
            + 3.0 * b3 * b3 * b4 * c0021
            + 3.0 * b3 * b4 * b4 * c0012
            + b4.powi(3) * c0003
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}
