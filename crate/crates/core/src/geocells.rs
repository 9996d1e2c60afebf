//! Adaptive hierarchical partitioning of geotagged points into classification
//! cells with per-cell count bounds, plus geolocalization-error reporting.
//!
//! The partitioner is a quadtree over a lat/lon rectangle: any cell holding
//! more than `max_count` points is split at its midpoints until it fits or
//! reaches `max_depth`. Leaves that end up below `min_count` are merged into
//! the class of the nearest retained leaf so the final label set only contains
//! well-populated cells while every point keeps a label.

use std::fmt::Write as _;

use crate::error::{OclError, Result};

/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A point on the globe in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Builds a point, rejecting coordinates outside [-90, 90] x [-180, 180].
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(OclError::config(format!("latitude {lat} out of [-90, 90]")));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(OclError::config(format!(
                "longitude {lon} out of [-180, 180]"
            )));
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Great-circle distance in kilometers.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat_a = a.lat.to_radians();
    let lat_b = b.lat.to_radians();
    let half_dlat = (b.lat - a.lat).to_radians() / 2.0;
    let half_dlon = (b.lon - a.lon).to_radians() / 2.0;
    let h = half_dlat.sin().powi(2) + lat_a.cos() * lat_b.cos() * half_dlon.sin().powi(2);
    // Clamp guards roundoff pushing sqrt(h) past 1 for near-antipodal pairs.
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Closed lat/lon rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl Rect {
    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat
            && p.lat <= self.max_lat
            && p.lon >= self.min_lon
            && p.lon <= self.max_lon
    }

    /// Geometric midpoint of the rectangle.
    pub fn midpoint(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.min_lat + self.max_lat) / 2.0,
            lon: (self.min_lon + self.max_lon) / 2.0,
        }
    }

    /// Quadrant index of `p` under the boundary tie rule: a point exactly on
    /// a split line belongs to the lower-lat (then lower-lon) quadrant.
    fn quadrant(&self, p: GeoPoint) -> usize {
        let (mid_lat, mid_lon) = (
            (self.min_lat + self.max_lat) / 2.0,
            (self.min_lon + self.max_lon) / 2.0,
        );
        let lat_hi = usize::from(p.lat > mid_lat);
        let lon_hi = usize::from(p.lon > mid_lon);
        lat_hi * 2 + lon_hi
    }

    fn child(&self, quadrant: usize) -> Rect {
        let (mid_lat, mid_lon) = (
            (self.min_lat + self.max_lat) / 2.0,
            (self.min_lon + self.max_lon) / 2.0,
        );
        let (min_lat, max_lat) = if quadrant / 2 == 0 {
            (self.min_lat, mid_lat)
        } else {
            (mid_lat, self.max_lat)
        };
        let (min_lon, max_lon) = if quadrant % 2 == 0 {
            (self.min_lon, mid_lon)
        } else {
            (mid_lon, self.max_lon)
        };
        Rect {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        }
    }
}

/// One leaf cell of the built tree.
///
/// `center` is the mean of the contained points (the rectangle midpoint for
/// empty leaves, used only when searching for a merge target). A leaf whose
/// count reached `min_count` is `retained` and owns a class; other leaves map
/// to the class of their nearest retained leaf.
#[derive(Debug, Clone)]
pub struct LeafCell {
    pub rect: Rect,
    pub depth: u32,
    pub count: usize,
    pub center: GeoPoint,
    pub class: usize,
    pub retained: bool,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Internal([usize; 4]),
    Leaf(usize),
}

#[derive(Debug, Clone)]
struct Node {
    rect: Rect,
    kind: NodeKind,
}

/// Quadtree partition of a point set into count-bounded classification cells.
///
/// Immutable after build; lookups are pure.
#[derive(Debug, Clone)]
pub struct CellTree {
    root: Rect,
    nodes: Vec<Node>,
    leaves: Vec<LeafCell>,
    class_centers: Vec<GeoPoint>,
    class_counts: Vec<usize>,
}

/// Builds a cell tree over `points`.
///
/// Nodes holding more than `max_count` points split at their midpoints until
/// they fit or hit `max_depth` (degenerate clusters of identical coordinates
/// stop there and may exceed `max_count`). Leaves with fewer than `min_count`
/// points are merged into the class of the nearest retained leaf by center
/// distance, so the total count is preserved.
pub fn build_cells(
    points: &[GeoPoint],
    min_count: usize,
    max_count: usize,
    max_depth: u32,
) -> Result<CellTree> {
    if points.is_empty() {
        return Err(OclError::config("build_cells requires a non-empty point set"));
    }
    if min_count < 1 {
        return Err(OclError::config("min_count must be >= 1"));
    }
    if max_count < min_count {
        return Err(OclError::config(format!(
            "max_count {max_count} < min_count {min_count}"
        )));
    }
    for p in points {
        GeoPoint::new(p.lat, p.lon)?;
    }

    let root = bounding_rect(points);
    let mut nodes: Vec<Node> = Vec::new();
    let mut leaves: Vec<LeafCell> = Vec::new();
    // Per-leaf membership, kept so class centers can be recomputed after merging.
    let mut leaf_members: Vec<Vec<usize>> = Vec::new();

    // Explicit stack; each entry owns the indices of the points in its rect.
    let root_slot = alloc_node(&mut nodes, root);
    let mut stack: Vec<(usize, u32, Vec<usize>)> =
        vec![(root_slot, 0, (0..points.len()).collect())];

    while let Some((slot, depth, indices)) = stack.pop() {
        let rect = nodes[slot].rect;
        if indices.len() > max_count && depth < max_depth {
            let mut parts: [Vec<usize>; 4] = [vec![], vec![], vec![], vec![]];
            for idx in indices {
                parts[rect.quadrant(points[idx])].push(idx);
            }
            let mut children = [0usize; 4];
            for (q, part) in parts.into_iter().enumerate() {
                let child_slot = alloc_node(&mut nodes, rect.child(q));
                children[q] = child_slot;
                stack.push((child_slot, depth + 1, part));
            }
            nodes[slot].kind = NodeKind::Internal(children);
        } else {
            let center = if indices.is_empty() {
                rect.midpoint()
            } else {
                mean_point(points, &indices)
            };
            let leaf_idx = leaves.len();
            leaves.push(LeafCell {
                rect,
                depth,
                count: indices.len(),
                center,
                class: usize::MAX,
                retained: false,
            });
            leaf_members.push(indices);
            nodes[slot].kind = NodeKind::Leaf(leaf_idx);
        }
    }

    // Retained leaves own the classes; everything else merges into the
    // nearest retained leaf by center distance.
    let mut retained: Vec<usize> = (0..leaves.len())
        .filter(|&i| leaves[i].count >= min_count)
        .collect();
    if retained.is_empty() {
        // All leaves undersized (min_count exceeds every cluster): fall back
        // to a single class anchored at the most populated leaf.
        let best = (0..leaves.len())
            .max_by_key(|&i| leaves[i].count)
            .expect("non-empty leaf set");
        retained.push(best);
    }
    for (class, &leaf_idx) in retained.iter().enumerate() {
        leaves[leaf_idx].class = class;
        leaves[leaf_idx].retained = true;
    }
    for i in 0..leaves.len() {
        if leaves[i].retained {
            continue;
        }
        let here = leaves[i].center;
        let mut best_class = 0;
        let mut best_dist = f64::INFINITY;
        for (class, &r) in retained.iter().enumerate() {
            let d = haversine_km(here, leaves[r].center);
            if d < best_dist {
                best_dist = d;
                best_class = class;
            }
        }
        leaves[i].class = best_class;
    }

    // Class centers are means over every point assigned to the class.
    let num_classes = retained.len();
    let mut lat_sums = vec![0.0f64; num_classes];
    let mut lon_sums = vec![0.0f64; num_classes];
    let mut class_counts = vec![0usize; num_classes];
    for (leaf, members) in leaves.iter().zip(&leaf_members) {
        class_counts[leaf.class] += members.len();
        for &idx in members {
            lat_sums[leaf.class] += points[idx].lat;
            lon_sums[leaf.class] += points[idx].lon;
        }
    }
    let class_centers = (0..num_classes)
        .map(|c| {
            let n = class_counts[c].max(1) as f64;
            GeoPoint {
                lat: lat_sums[c] / n,
                lon: lon_sums[c] / n,
            }
        })
        .collect();

    Ok(CellTree {
        root,
        nodes,
        leaves,
        class_centers,
        class_counts,
    })
}

fn alloc_node(nodes: &mut Vec<Node>, rect: Rect) -> usize {
    nodes.push(Node {
        rect,
        kind: NodeKind::Leaf(usize::MAX),
    });
    nodes.len() - 1
}

fn bounding_rect(points: &[GeoPoint]) -> Rect {
    let mut rect = Rect {
        min_lat: f64::INFINITY,
        max_lat: f64::NEG_INFINITY,
        min_lon: f64::INFINITY,
        max_lon: f64::NEG_INFINITY,
    };
    for p in points {
        rect.min_lat = rect.min_lat.min(p.lat);
        rect.max_lat = rect.max_lat.max(p.lat);
        rect.min_lon = rect.min_lon.min(p.lon);
        rect.max_lon = rect.max_lon.max(p.lon);
    }
    rect
}

fn mean_point(points: &[GeoPoint], indices: &[usize]) -> GeoPoint {
    let n = indices.len() as f64;
    let (mut lat, mut lon) = (0.0, 0.0);
    for &i in indices {
        lat += points[i].lat;
        lon += points[i].lon;
    }
    GeoPoint {
        lat: lat / n,
        lon: lon / n,
    }
}

impl CellTree {
    pub fn root_region(&self) -> Rect {
        self.root
    }

    pub fn leaves(&self) -> &[LeafCell] {
        &self.leaves
    }

    pub fn num_classes(&self) -> usize {
        self.class_centers.len()
    }

    pub fn class_center(&self, class: usize) -> GeoPoint {
        self.class_centers[class]
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.class_counts[class]
    }

    /// Class index of the unique leaf containing `p`.
    ///
    /// Boundary points resolve to the lower-lat, then lower-lon leaf.
    pub fn assign_label(&self, p: GeoPoint) -> Result<usize> {
        if !self.root.contains(p) {
            return Err(OclError::OutOfRegion { lat: p.lat, lon: p.lon });
        }
        let mut node = &self.nodes[0];
        loop {
            match node.kind {
                NodeKind::Internal(children) => {
                    node = &self.nodes[children[node.rect.quadrant(p)]];
                }
                NodeKind::Leaf(leaf_idx) => return Ok(self.leaves[leaf_idx].class),
            }
        }
    }

    /// Cumulative distribution of distances from each point to its assigned
    /// class center: sorted `(distance_km, cumulative_fraction)` knots ending
    /// at fraction 1.0.
    pub fn distance_cdf(&self, points: &[GeoPoint]) -> Result<Vec<(f64, f64)>> {
        let mut dists = Vec::with_capacity(points.len());
        for &p in points {
            let class = self.assign_label(p)?;
            dists.push(haversine_km(p, self.class_centers[class]));
        }
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let n = dists.len() as f64;
        Ok(dists
            .into_iter()
            .enumerate()
            .map(|(i, d)| (d, (i + 1) as f64 / n))
            .collect())
    }

    /// Text table of classes: one row per class with its bounding box, center
    /// and count.
    pub fn export_cells(&self) -> String {
        let mut out = String::from(
            "class_id,min_lat,max_lat,min_lon,max_lon,center_lat,center_lon,count\n",
        );
        for class in 0..self.num_classes() {
            let mut bbox: Option<Rect> = None;
            for leaf in self.leaves.iter().filter(|l| l.class == class) {
                bbox = Some(match bbox {
                    None => leaf.rect,
                    Some(b) => Rect {
                        min_lat: b.min_lat.min(leaf.rect.min_lat),
                        max_lat: b.max_lat.max(leaf.rect.max_lat),
                        min_lon: b.min_lon.min(leaf.rect.min_lon),
                        max_lon: b.max_lon.max(leaf.rect.max_lon),
                    },
                });
            }
            let b = bbox.expect("every class has at least one leaf");
            let c = self.class_centers[class];
            writeln!(
                out,
                "{class},{},{},{},{},{},{},{}",
                b.min_lat, b.max_lat, b.min_lon, b.max_lon, c.lat, c.lon, self.class_counts[class]
            )
            .expect("write to string");
        }
        out
    }
}

/// Two-column CSV of a distance CDF.
pub fn cdf_to_csv(cdf: &[(f64, f64)]) -> String {
    let mut out = String::from("distance_km,cumulative_fraction\n");
    for (d, f) in cdf {
        writeln!(out, "{d},{f}").expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_points(n: usize, rect: Rect, seed: u64) -> Vec<GeoPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| GeoPoint {
                lat: rng.random_range(rect.min_lat..rect.max_lat),
                lon: rng.random_range(rect.min_lon..rect.max_lon),
            })
            .collect()
    }

    const UNIT: Rect = Rect {
        min_lat: 0.0,
        max_lat: 1.0,
        min_lon: 0.0,
        max_lon: 1.0,
    };

    #[test]
    fn haversine_identical_points_is_zero() {
        let p = GeoPoint::new(37.0, -122.0).unwrap();
        assert_eq!(haversine_km(p, p), 0.0);
    }

    #[test]
    fn haversine_antipodal_is_half_circumference() {
        let a = GeoPoint::new(0.0, 0.0).unwrap();
        let b = GeoPoint::new(0.0, 180.0).unwrap();
        let expected = std::f64::consts::PI * EARTH_RADIUS_KM;
        let got = haversine_km(a, b);
        assert!(
            ((got - expected) / expected).abs() < 1e-6,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn haversine_one_degree_of_longitude_at_equator() {
        let a = GeoPoint::new(0.0, 0.0).unwrap();
        let b = GeoPoint::new(0.0, 1.0).unwrap();
        let expected = std::f64::consts::PI / 180.0 * EARTH_RADIUS_KM;
        let got = haversine_km(a, b);
        assert!(
            ((got - expected) / expected).abs() < 1e-3,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn haversine_symmetry_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = GeoPoint {
                lat: rng.random_range(-90.0..90.0),
                lon: rng.random_range(-180.0..180.0),
            };
            let b = GeoPoint {
                lat: rng.random_range(-90.0..90.0),
                lon: rng.random_range(-180.0..180.0),
            };
            assert_eq!(haversine_km(a, b), haversine_km(b, a));
            assert!(haversine_km(a, b) <= std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9);
        }
    }

    #[test]
    fn geopoint_rejects_out_of_range() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 180.5).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn single_point_yields_single_cell() {
        let tree = build_cells(&[GeoPoint::new(10.0, 20.0).unwrap()], 1, 10, 8).unwrap();
        assert_eq!(tree.num_classes(), 1);
        assert_eq!(tree.class_count(0), 1);
    }

    #[test]
    fn identical_points_form_degenerate_leaf_at_max_depth() {
        let p = GeoPoint::new(5.0, 5.0).unwrap();
        let points = vec![p; 100];
        let tree = build_cells(&points, 1, 10, 8).unwrap();
        let populated: Vec<_> = tree.leaves().iter().filter(|l| l.count > 0).collect();
        assert_eq!(populated.len(), 1);
        assert_eq!(populated[0].count, 100);
        assert_eq!(populated[0].depth, 8);
        assert_eq!(tree.num_classes(), 1);
    }

    #[test]
    fn empty_input_is_a_configuration_error() {
        assert!(matches!(
            build_cells(&[], 1, 10, 8),
            Err(OclError::Config(_))
        ));
    }

    #[test]
    fn uniform_points_respect_count_bounds() {
        let points = uniform_points(10_000, UNIT, 3);
        let (min_count, max_count) = (50, 2500);
        let tree = build_cells(&points, min_count, max_count, 16).unwrap();
        for leaf in tree.leaves().iter().filter(|l| l.retained) {
            assert!(
                (min_count..=max_count).contains(&leaf.count),
                "retained leaf count {} outside [{min_count}, {max_count}]",
                leaf.count
            );
        }
        // Brute-force recount of the produced partition.
        let total: usize = tree.leaves().iter().map(|l| l.count).sum();
        assert_eq!(total, points.len());
        let mut by_class = vec![0usize; tree.num_classes()];
        for &p in &points {
            by_class[tree.assign_label(p).unwrap()] += 1;
        }
        for (class, &count) in by_class.iter().enumerate() {
            assert_eq!(count, tree.class_count(class));
        }
    }

    #[test]
    fn assign_label_matches_linear_scan_oracle() {
        let points = uniform_points(2_000, UNIT, 7);
        let tree = build_cells(&points, 10, 200, 12).unwrap();
        let queries = uniform_points(1_000, UNIT, 8);
        for q in queries {
            if !tree.root_region().contains(q) {
                assert!(matches!(
                    tree.assign_label(q),
                    Err(OclError::OutOfRegion { .. })
                ));
                continue;
            }
            let got = tree.assign_label(q).unwrap();
            // Oracle: scan every leaf for geometric containment under the
            // same tie rule (smallest rect containing q wins; the tie rule
            // means exactly one deepest leaf claims it).
            let mut expect = None;
            for leaf in tree.leaves() {
                if leaf_claims(leaf, q, tree.root_region()) {
                    expect = Some(leaf.class);
                }
            }
            assert_eq!(Some(got), expect, "mismatch at ({}, {})", q.lat, q.lon);
        }
    }

    /// Containment consistent with the quadrant tie rule: upper edges are
    /// inclusive, lower edges exclusive unless they lie on the root boundary.
    fn leaf_claims(leaf: &LeafCell, p: GeoPoint, root: Rect) -> bool {
        let lat_lo_ok = if leaf.rect.min_lat == root.min_lat {
            p.lat >= leaf.rect.min_lat
        } else {
            p.lat > leaf.rect.min_lat
        };
        let lon_lo_ok = if leaf.rect.min_lon == root.min_lon {
            p.lon >= leaf.rect.min_lon
        } else {
            p.lon > leaf.rect.min_lon
        };
        lat_lo_ok && p.lat <= leaf.rect.max_lat && lon_lo_ok && p.lon <= leaf.rect.max_lon
    }

    #[test]
    fn boundary_point_resolves_to_lower_lat_then_lon() {
        // Four well-separated clusters force one split of the unit square.
        let mut points = Vec::new();
        for (lat, lon) in [(0.1, 0.1), (0.1, 0.9), (0.9, 0.1), (0.9, 0.9)] {
            for _ in 0..5 {
                points.push(GeoPoint { lat, lon });
            }
        }
        points.push(GeoPoint { lat: 0.0, lon: 0.0 });
        points.push(GeoPoint { lat: 1.0, lon: 1.0 });
        let tree = build_cells(&points, 1, 6, 8).unwrap();
        let mid = GeoPoint { lat: 0.5, lon: 0.5 };
        let low = GeoPoint { lat: 0.25, lon: 0.25 };
        assert_eq!(
            tree.assign_label(mid).unwrap(),
            tree.assign_label(low).unwrap(),
            "midpoint must land in the lower-lat/lower-lon quadrant"
        );
        // Repeated queries are stable.
        assert_eq!(tree.assign_label(mid).unwrap(), tree.assign_label(mid).unwrap());
    }

    #[test]
    fn outside_point_is_rejected() {
        let points = uniform_points(100, UNIT, 1);
        let tree = build_cells(&points, 1, 50, 8).unwrap();
        let outside = GeoPoint { lat: 5.0, lon: 5.0 };
        assert!(matches!(
            tree.assign_label(outside),
            Err(OclError::OutOfRegion { .. })
        ));
    }

    #[test]
    fn cdf_of_points_at_their_center_jumps_to_one_at_zero() {
        let p = GeoPoint::new(0.25, 0.25).unwrap();
        let points = vec![p; 60];
        let tree = build_cells(&points, 1, 100, 8).unwrap();
        let cdf = tree.distance_cdf(&points).unwrap();
        assert_eq!(cdf.first().unwrap().0, 0.0);
        assert_eq!(cdf.last().unwrap().1, 1.0);
        assert!(cdf.iter().all(|&(d, _)| d == 0.0));
    }

    #[test]
    fn cdf_matches_brute_force_fractions() {
        let points = uniform_points(1_000, UNIT, 9);
        let tree = build_cells(&points, 20, 400, 10).unwrap();
        let cdf = tree.distance_cdf(&points).unwrap();
        assert_eq!(cdf.len(), points.len());
        // Monotone, ends at exactly 1.0.
        for pair in cdf.windows(2) {
            assert!(pair[0].0 <= pair[1].0);
            assert!(pair[0].1 <= pair[1].1);
        }
        assert_eq!(cdf.last().unwrap().1, 1.0);
        // Each knot's fraction equals a direct recount.
        let dists: Vec<f64> = points
            .iter()
            .map(|&p| {
                let c = tree.assign_label(p).unwrap();
                haversine_km(p, tree.class_center(c))
            })
            .collect();
        for &(d, frac) in cdf.iter().step_by(97) {
            let below = dists.iter().filter(|&&x| x <= d).count();
            assert!(
                frac <= below as f64 / dists.len() as f64 + 1e-12,
                "cdf fraction {frac} exceeds recount at distance {d}"
            );
        }
    }

    #[test]
    fn export_cells_has_one_row_per_class() {
        let points = uniform_points(500, UNIT, 10);
        let tree = build_cells(&points, 10, 100, 10).unwrap();
        let table = tree.export_cells();
        assert_eq!(table.lines().count(), tree.num_classes() + 1);
        assert!(table.starts_with("class_id,"));
    }
}
