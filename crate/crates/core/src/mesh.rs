//! Conforming triangular meshes with tagged boundary segments and per-triangle
//! region labels.
//!
//! Meshes are immutable once built: [`Mesh::new`] checks every structural
//! invariant, so any `Mesh` value in the program is known to be a valid,
//! positively oriented, conforming triangulation.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid mesh ({rule}): {detail}")]
    Validation { rule: &'static str, detail: String },
    #[error("invalid generation parameters: {0}")]
    Generation(String),
}

fn invalid(rule: &'static str, detail: impl Into<String>) -> MeshError {
    MeshError::Validation {
        rule,
        detail: detail.into(),
    }
}

/// How a boundary segment is constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryKind {
    VelocityDirichlet,
    EtaDirichlet,
    FreeSlip,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoundaryTag {
    pub name: String,
    pub kind: BoundaryKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: String,
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    fn is_proper(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            && self.x1 > self.x0
            && self.y1 > self.y0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    regions: Vec<i32>,
    boundary: Vec<BoundaryEdge>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Mesh {
    /// Builds a mesh and checks all invariants.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        regions: Vec<i32>,
        boundary: Vec<BoundaryEdge>,
    ) -> Result<Self, MeshError> {
        let mesh = Self {
            vertices,
            triangles,
            regions,
            boundary,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<(), MeshError> {
        let nv = self.vertices.len();
        if self.regions.len() != self.triangles.len() {
            return Err(invalid(
                "region labels",
                format!(
                    "{} region labels for {} triangles",
                    self.regions.len(),
                    self.triangles.len()
                ),
            ));
        }
        if self.triangles.is_empty() {
            return Err(invalid("empty mesh", "mesh has no triangles"));
        }
        for (i, v) in self.vertices.iter().enumerate() {
            if !v[0].is_finite() || !v[1].is_finite() {
                return Err(invalid("finite coordinates", format!("vertex {i}")));
            }
        }
        let mut edge_use: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v >= nv) {
                return Err(invalid(
                    "vertex index out of range",
                    format!("triangle {t} references vertex {bad} of {nv}"),
                ));
            }
            if self.signed_area(t) <= 0.0 {
                return Err(invalid("non-positive area", format!("triangle {t}")));
            }
            for k in 0..3 {
                *edge_use
                    .entry(edge_key(tri[k], tri[(k + 1) % 3]))
                    .or_default() += 1;
            }
        }
        if let Some((e, n)) = edge_use.iter().find(|(_, &n)| n > 2) {
            return Err(invalid(
                "non-conforming edge",
                format!("edge {:?} is shared by {n} triangles", e),
            ));
        }
        let mut tagged: HashMap<(usize, usize), &str> = HashMap::new();
        for (b, edge) in self.boundary.iter().enumerate() {
            let [a, c] = edge.vertices;
            if a >= nv || c >= nv {
                return Err(invalid(
                    "vertex index out of range",
                    format!("boundary edge {b}"),
                ));
            }
            if edge.tag.is_empty() || edge.tag.contains(char::is_whitespace) {
                return Err(invalid("boundary tag name", format!("boundary edge {b}")));
            }
            let key = edge_key(a, c);
            if edge_use.get(&key).copied() != Some(1) {
                return Err(invalid(
                    "boundary edge on exactly one triangle",
                    format!("boundary edge {b} ({a}, {c})"),
                ));
            }
            if tagged.insert(key, edge.tag.as_str()).is_some() {
                return Err(invalid(
                    "one tag per boundary edge",
                    format!("boundary edge ({a}, {c}) is listed twice"),
                ));
            }
        }
        // An edge used once that is not tagged is either an untagged boundary
        // or an interior edge next to a hanging vertex.
        if let Some((e, _)) = edge_use
            .iter()
            .find(|(e, &n)| n == 1 && !tagged.contains_key(e))
        {
            return Err(invalid(
                "non-conforming or untagged boundary",
                format!("edge {:?} belongs to one triangle but carries no tag", e),
            ));
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn regions(&self) -> &[i32] {
        &self.regions
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Sorted, de-duplicated boundary tag names.
    pub fn tag_names(&self) -> Vec<String> {
        self.boundary
            .iter()
            .map(|e| e.tag.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn triangle_points(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [p, q, r] = self.triangle_points(t);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
    }

    pub fn area(&self, t: usize) -> f64 {
        self.signed_area(t)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    /// Longest edge of triangle `t`.
    pub fn diameter(&self, t: usize) -> f64 {
        let p = self.triangle_points(t);
        (0..3)
            .map(|k| dist(p[k], p[(k + 1) % 3]))
            .fold(0.0, f64::max)
    }

    /// Longest axis-aligned edge of triangle `t`; for the split-quad meshes
    /// produced by [`generate_rectangle`] this is the cell spacing.
    pub fn cell_size(&self, t: usize) -> f64 {
        let p = self.triangle_points(t);
        (0..3)
            .map(|k| {
                let (a, b) = (p[k], p[(k + 1) % 3]);
                (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [p, q, r] = self.triangle_points(t);
        [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0]
    }

    pub fn bounding_box(&self) -> Rect {
        let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            r.x0 = r.x0.min(v[0]);
            r.y0 = r.y0.min(v[1]);
            r.x1 = r.x1.max(v[0]);
            r.y1 = r.y1.max(v[1]);
        }
        r
    }

    /// Returns a copy with the region label of each triangle replaced.
    pub fn with_regions(&self, regions: Vec<i32>) -> Result<Self, MeshError> {
        Self::new(
            self.vertices.clone(),
            self.triangles.clone(),
            regions,
            self.boundary.clone(),
        )
    }

    pub fn export(&self) -> String {
        let mut out = String::from("TFMESH 1\n");
        let _ = writeln!(out, "VERTICES {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{} {}", v[0], v[1]);
        }
        let _ = writeln!(out, "TRIANGLES {}", self.triangles.len());
        for (t, r) in self.triangles.iter().zip(&self.regions) {
            let _ = writeln!(out, "{} {} {} {}", t[0], t[1], t[2], r);
        }
        let _ = writeln!(out, "BOUNDARY {}", self.boundary.len());
        for e in &self.boundary {
            let _ = writeln!(out, "{} {} {}", e.vertices[0], e.vertices[1], e.tag);
        }
        out
    }

    pub fn import(text: &str) -> Result<Self, MeshError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let last_line = text.lines().count().max(1);
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| MeshError::Parse {
                line: last_line,
                message: format!("unexpected end of document, expected {what}"),
            })
        };

        let (line, header) = next("header")?;
        if header.split_whitespace().collect::<Vec<_>>() != ["TFMESH", "1"] {
            return Err(MeshError::Parse {
                line,
                message: format!("expected header `TFMESH 1`, found `{header}`"),
            });
        }

        let nv = section_count(next("VERTICES section")?, "VERTICES")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (line, l) = next("vertex")?;
            let f = fields(line, l, 2)?;
            vertices.push([parse_num::<f64>(line, f[0])?, parse_num::<f64>(line, f[1])?]);
        }

        let nt = section_count(next("TRIANGLES section")?, "TRIANGLES")?;
        let mut triangles = Vec::with_capacity(nt);
        let mut regions = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (line, l) = next("triangle")?;
            let f = fields(line, l, 4)?;
            let mut tri = [0usize; 3];
            for k in 0..3 {
                tri[k] = parse_index(line, f[k], nv)?;
            }
            triangles.push(tri);
            regions.push(parse_num::<i32>(line, f[3])?);
        }

        let nb = section_count(next("BOUNDARY section")?, "BOUNDARY")?;
        let mut boundary = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (line, l) = next("boundary edge")?;
            let f = fields(line, l, 3)?;
            boundary.push(BoundaryEdge {
                vertices: [parse_index(line, f[0], nv)?, parse_index(line, f[1], nv)?],
                tag: f[2].to_string(),
            });
        }
        if let Some((line, l)) = lines.next() {
            return Err(MeshError::Parse {
                line,
                message: format!("trailing content `{l}`"),
            });
        }
        Self::new(vertices, triangles, regions, boundary)
    }

    /// Size of the split square a triangle of this area would come from,
    /// `sqrt(2 * area)`; equals the cell spacing on generated meshes and
    /// halves with every two bisections.
    pub fn equivalent_size(&self, t: usize) -> f64 {
        (2.0 * self.area(t)).sqrt()
    }

    /// Conforming local refinement by longest-edge bisection. Every round
    /// bisects the triangles for which `mark` returns true (with the
    /// neighbours needed to stay conforming) until none is marked or
    /// `max_rounds` is reached. Regions and boundary tags are inherited.
    pub fn refine(
        &self,
        mut mark: impl FnMut(&Mesh, usize) -> bool,
        max_rounds: usize,
    ) -> Result<Mesh, MeshError> {
        let mut mesh = self.clone();
        for _ in 0..max_rounds {
            let marked: Vec<usize> = (0..mesh.num_triangles()).filter(|&t| mark(&mesh, t)).collect();
            if marked.is_empty() {
                break;
            }
            let mut bisector = Bisector::new(mesh);
            for t in marked {
                bisector.refine(t);
            }
            mesh = bisector.finish()?;
        }
        Ok(mesh)
    }

    /// Builds a point-location index over the triangles.
    pub fn locator(&self) -> PointLocator<'_> {
        PointLocator::new(self)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn section_count((line, l): (usize, &str), name: &str) -> Result<usize, MeshError> {
    let f: Vec<&str> = l.split_whitespace().collect();
    if f.len() != 2 || f[0] != name {
        return Err(MeshError::Parse {
            line,
            message: format!("expected `{name} <count>`, found `{l}`"),
        });
    }
    parse_num(line, f[1])
}

fn fields(line: usize, l: &str, n: usize) -> Result<Vec<&str>, MeshError> {
    let f: Vec<&str> = l.split_whitespace().collect();
    if f.len() != n {
        return Err(MeshError::Parse {
            line,
            message: format!("expected {n} fields, found {}", f.len()),
        });
    }
    Ok(f)
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, MeshError> {
    s.parse().map_err(|_| MeshError::Parse {
        line,
        message: format!("cannot parse `{s}`"),
    })
}

fn parse_index(line: usize, s: &str, n: usize) -> Result<usize, MeshError> {
    let i: usize = parse_num(line, s)?;
    if i >= n {
        return Err(MeshError::Parse {
            line,
            message: format!("vertex index {i} out of range (vertex count {n})"),
        });
    }
    Ok(i)
}

/// Parameters for [`generate_rectangle`].
#[derive(Debug, Clone, PartialEq)]
pub struct RectangleSpec {
    pub width: f64,
    pub height: f64,
    /// Cell spacing away from the refinement box.
    pub coarse_size: f64,
    pub refinement: Option<Refinement>,
    /// Growth factor of consecutive cells between the fine and coarse bands.
    pub grading: f64,
    /// Labelled rectangles; a triangle takes the label of the first rectangle
    /// containing its centroid, 0 otherwise. Rectangle edges become grid lines.
    pub regions: Vec<(Rect, i32)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub rect: Rect,
    pub size: f64,
}

impl RectangleSpec {
    pub fn new(width: f64, height: f64, coarse_size: f64) -> Self {
        Self {
            width,
            height,
            coarse_size,
            refinement: None,
            grading: 1.25,
            regions: Vec::new(),
        }
    }

    pub fn refined(mut self, rect: Rect, size: f64) -> Self {
        self.refinement = Some(Refinement { rect, size });
        self
    }

    pub fn with_region(mut self, rect: Rect, id: i32) -> Self {
        self.regions.push((rect, id));
        self
    }
}

/// Generates a split-quad triangulation of `[0, width] x [0, height]`.
///
/// Grid lines are tensor products of two graded 1D point sets. Cells inside
/// the refinement box have edge length at most `refinement.size`; elsewhere at
/// most `coarse_size`, growing geometrically away from the box. Diagonals are
/// mirrored about both mid-axes so the mesh is symmetric under reflection.
/// Boundary edges are tagged `west`, `east`, `south` and `north`.
pub fn generate_rectangle(spec: &RectangleSpec) -> Result<Mesh, MeshError> {
    let (w, h) = (spec.width, spec.height);
    if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
        return Err(MeshError::Generation(format!(
            "degenerate rectangle {w} x {h}"
        )));
    }
    if !(spec.coarse_size.is_finite() && spec.coarse_size > 0.0) {
        return Err(MeshError::Generation("coarse_size must be positive".into()));
    }
    if !(spec.grading.is_finite() && spec.grading >= 1.0) {
        return Err(MeshError::Generation("grading must be at least 1".into()));
    }
    let domain = Rect::new(0.0, 0.0, w, h);
    if let Some(r) = &spec.refinement {
        if !(r.size.is_finite() && r.size > 0.0) {
            return Err(MeshError::Generation("fine_size must be positive".into()));
        }
        if r.size > spec.coarse_size {
            return Err(MeshError::Generation(
                "fine_size must not exceed coarse_size".into(),
            ));
        }
        if !r.rect.is_proper() || !inside(&r.rect, &domain) {
            return Err(MeshError::Generation(
                "fine_box must be a proper rectangle inside the domain".into(),
            ));
        }
    }
    for (rect, id) in &spec.regions {
        if !rect.is_proper() || !inside(rect, &domain) {
            return Err(MeshError::Generation(format!(
                "region {id} must be a proper rectangle inside the domain"
            )));
        }
    }

    let fine = spec.refinement.map(|r| (r.rect.x0, r.rect.x1, r.size));
    let xs = axis_points(
        w,
        spec.coarse_size,
        spec.grading,
        fine,
        spec.regions.iter().flat_map(|(r, _)| [r.x0, r.x1]),
    );
    let fine = spec.refinement.map(|r| (r.rect.y0, r.rect.y1, r.size));
    let ys = axis_points(
        h,
        spec.coarse_size,
        spec.grading,
        fine,
        spec.regions.iter().flat_map(|(r, _)| [r.y0, r.y1]),
    );

    let (nx, ny) = (xs.len() - 1, ys.len() - 1);
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for &y in &ys {
        for &x in &xs {
            vertices.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            let cx = 0.5 * (xs[i] + xs[i + 1]);
            let cy = 0.5 * (ys[j] + ys[j + 1]);
            if (cx < 0.5 * w) == (cy < 0.5 * h) {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    let regions = triangles
        .iter()
        .map(|t| {
            let c = [
                (vertices[t[0]][0] + vertices[t[1]][0] + vertices[t[2]][0]) / 3.0,
                (vertices[t[0]][1] + vertices[t[1]][1] + vertices[t[2]][1]) / 3.0,
            ];
            spec.regions
                .iter()
                .find(|(r, _)| r.contains(c))
                .map_or(0, |(_, id)| *id)
        })
        .collect();

    let mut boundary = Vec::with_capacity(2 * (nx + ny));
    let mut push = |a: usize, b: usize, tag: &str| {
        boundary.push(BoundaryEdge {
            vertices: [a, b],
            tag: tag.to_string(),
        })
    };
    for i in 0..nx {
        push(vid(i, 0), vid(i + 1, 0), "south");
    }
    for j in 0..ny {
        push(vid(nx, j), vid(nx, j + 1), "east");
    }
    for i in (0..nx).rev() {
        push(vid(i + 1, ny), vid(i, ny), "north");
    }
    for j in (0..ny).rev() {
        push(vid(0, j + 1), vid(0, j), "west");
    }
    Mesh::new(vertices, triangles, regions, boundary)
}

fn inside(r: &Rect, domain: &Rect) -> bool {
    r.x0 >= domain.x0 && r.y0 >= domain.y0 && r.x1 <= domain.x1 && r.y1 <= domain.y1
}

/// Graded 1D points on `[0, len]` including all interior breakpoints.
fn axis_points(
    len: f64,
    coarse: f64,
    grading: f64,
    fine: Option<(f64, f64, f64)>,
    extra: impl Iterator<Item = f64>,
) -> Vec<f64> {
    let size_at = |x: f64| match fine {
        None => coarse,
        Some((a, b, s)) => {
            let d = if x < a {
                a - x
            } else if x > b {
                x - b
            } else {
                0.0
            };
            coarse.min(s + (grading - 1.0) * d)
        }
    };
    let tol = 1e-12 * len;
    let mut breaks: Vec<f64> = vec![0.0, len];
    if let Some((a, b, _)) = fine {
        breaks.extend([a, b]);
    }
    breaks.extend(extra);
    breaks.retain(|&x| x >= 0.0 && x <= len);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() <= tol);

    let mut pts = vec![0.0];
    for seg in breaks.windows(2) {
        let (p, q) = (seg[0], seg[1]);
        let l = q - p;
        let (hp, hq) = (size_at(p), size_at(q));
        if (hp - hq).abs() <= 1e-12 * hp.max(hq) {
            let n = ((l / hp) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            for k in 1..n {
                pts.push(p + l * k as f64 / n as f64);
            }
        } else {
            // March from the finer end with the local size, then shrink the
            // offsets uniformly so the last one lands on the far breakpoint.
            let from_p = hp < hq;
            let mut offsets = vec![0.0];
            let mut o = 0.0;
            while o < l * (1.0 - 1e-12) {
                let x = if from_p { p + o } else { q - o };
                o += size_at(x);
                offsets.push(o);
            }
            let scale = l / o;
            let n = offsets.len() - 1;
            if from_p {
                for off in &offsets[1..n] {
                    pts.push(p + off * scale);
                }
            } else {
                for off in offsets[1..n].iter().rev() {
                    pts.push(q - off * scale);
                }
            }
        }
        pts.push(q);
    }
    pts
}

/// Uniform-bucket index for locating the triangle containing a point.
pub struct PointLocator<'a> {
    mesh: &'a Mesh,
    bbox: Rect,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'a> PointLocator<'a> {
    fn new(mesh: &'a Mesh) -> Self {
        let bbox = mesh.bounding_box();
        let n = ((mesh.num_triangles() as f64).sqrt().ceil() as usize).max(1);
        let (nx, ny) = (n, n);
        let mut buckets = vec![Vec::new(); nx * ny];
        let cell = |x: f64, lo: f64, span: f64, n: usize| {
            (((x - lo) / span * n as f64).floor().max(0.0) as usize).min(n - 1)
        };
        for t in 0..mesh.num_triangles() {
            let p = mesh.triangle_points(t);
            let xmin = p.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
            let xmax = p.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
            let ymin = p.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
            let ymax = p.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
            let (i0, i1) = (
                cell(xmin, bbox.x0, bbox.width(), nx),
                cell(xmax, bbox.x0, bbox.width(), nx),
            );
            let (j0, j1) = (
                cell(ymin, bbox.y0, bbox.height(), ny),
                cell(ymax, bbox.y0, bbox.height(), ny),
            );
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(t);
                }
            }
        }
        Self {
            mesh,
            bbox,
            nx,
            ny,
            buckets,
        }
    }

    /// Returns the containing triangle and the barycentric coordinates of `p`.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        if !self.bbox.contains(p) {
            return None;
        }
        let i = (((p[0] - self.bbox.x0) / self.bbox.width() * self.nx as f64) as usize)
            .min(self.nx - 1);
        let j = (((p[1] - self.bbox.y0) / self.bbox.height() * self.ny as f64) as usize)
            .min(self.ny - 1);
        let tol = -1e-12;
        for &t in &self.buckets[j * self.nx + i] {
            let l = barycentric(self.mesh.triangle_points(t), p);
            if l.iter().all(|&v| v >= tol) {
                return Some((t, l));
            }
        }
        None
    }
}

/// Longest-edge bisection state with edge adjacency.
struct Bisector {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    regions: Vec<i32>,
    boundary: Vec<BoundaryEdge>,
    boundary_index: HashMap<(usize, usize), usize>,
    edges: HashMap<(usize, usize), Vec<usize>>,
    midpoints: HashMap<(usize, usize), usize>,
}

impl Bisector {
    fn new(mesh: Mesh) -> Self {
        let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            for k in 0..3 {
                edges.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_default().push(t);
            }
        }
        let boundary_index = mesh
            .boundary
            .iter()
            .enumerate()
            .map(|(i, e)| (edge_key(e.vertices[0], e.vertices[1]), i))
            .collect();
        Self {
            vertices: mesh.vertices,
            triangles: mesh.triangles,
            regions: mesh.regions,
            boundary: mesh.boundary,
            boundary_index,
            edges,
            midpoints: HashMap::new(),
        }
    }

    /// Local index `k` of the longest edge `(tri[k], tri[k + 1])`; exact
    /// ties go to the smaller vertex pair so neighbours agree.
    fn longest(&self, t: usize) -> usize {
        let tri = self.triangles[t];
        let len = |k: usize| {
            let (a, b) = (self.vertices[tri[k]], self.vertices[tri[(k + 1) % 3]]);
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
        };
        (0..3)
            .max_by(|&i, &j| {
                len(i).total_cmp(&len(j)).then_with(|| {
                    let (ki, kj) = (
                        edge_key(tri[i], tri[(i + 1) % 3]),
                        edge_key(tri[j], tri[(j + 1) % 3]),
                    );
                    kj.cmp(&ki)
                })
            })
            .expect("three edges")
    }

    fn neighbour(&self, t: usize, key: (usize, usize)) -> Option<usize> {
        self.edges[&key].iter().copied().find(|&n| n != t)
    }

    /// Bisects `t` once, first bisecting along its longest-edge propagation
    /// path so that the mesh stays conforming.
    fn refine(&mut self, t: usize) {
        let original = self.triangles[t];
        while self.triangles[t] == original {
            // Walk to a terminal edge shared by two triangles whose longest
            // edges coincide (or a boundary edge).
            let mut cur = t;
            loop {
                let tri = self.triangles[cur];
                let k = self.longest(cur);
                let key = edge_key(tri[k], tri[(k + 1) % 3]);
                match self.neighbour(cur, key) {
                    None => {
                        self.split_edge(key);
                        break;
                    }
                    Some(n) => {
                        let ntri = self.triangles[n];
                        let kn = self.longest(n);
                        if edge_key(ntri[kn], ntri[(kn + 1) % 3]) == key {
                            self.split_edge(key);
                            break;
                        }
                        cur = n;
                    }
                }
            }
        }
    }

    /// Bisects every triangle sharing edge `key` at its midpoint.
    fn split_edge(&mut self, key: (usize, usize)) {
        let (a, b) = key;
        let m = *self.midpoints.entry(key).or_insert_with(|| {
            let (pa, pb) = (self.vertices[a], self.vertices[b]);
            self.vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            self.vertices.len() - 1
        });
        let owners = self.edges.remove(&key).unwrap_or_default();
        for t in owners {
            let tri = self.triangles[t];
            let k = (0..3)
                .find(|&k| edge_key(tri[k], tri[(k + 1) % 3]) == key)
                .expect("edge of owner");
            let (p, q, r) = (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]);
            let child = self.triangles.len();
            self.triangles[t] = [p, m, r];
            self.triangles.push([m, q, r]);
            self.regions.push(self.regions[t]);
            let qr = self.edges.get_mut(&edge_key(q, r)).expect("edge");
            for o in qr.iter_mut() {
                if *o == t {
                    *o = child;
                }
            }
            self.edges.entry(edge_key(p, m)).or_default().push(t);
            self.edges.entry(edge_key(m, q)).or_default().push(child);
            let mr = self.edges.entry(edge_key(m, r)).or_default();
            mr.push(t);
            mr.push(child);
        }
        if let Some(i) = self.boundary_index.remove(&key) {
            let [u, v] = self.boundary[i].vertices;
            let tag = self.boundary[i].tag.clone();
            self.boundary[i].vertices = [u, m];
            self.boundary.push(BoundaryEdge {
                vertices: [m, v],
                tag,
            });
            self.boundary_index.insert(edge_key(u, m), i);
            self.boundary_index.insert(edge_key(m, v), self.boundary.len() - 1);
        }
    }

    fn finish(self) -> Result<Mesh, MeshError> {
        Mesh::new(self.vertices, self.triangles, self.regions, self.boundary)
    }
}

pub fn barycentric(tri: [[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = tri;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Mesh {
        generate_rectangle(&RectangleSpec::new(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn unit_square_has_two_triangles() {
        let m = unit_square();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_triangles(), 2);
        assert_eq!(m.boundary_edges().len(), 4);
        assert_eq!(m.tag_names(), ["east", "north", "south", "west"]);
    }

    #[test]
    fn area_of_two_by_one() {
        let m = generate_rectangle(&RectangleSpec::new(2.0, 1.0, 1.0)).unwrap();
        assert_eq!(m.total_area(), 2.0);
    }

    #[test]
    fn refined_band_respects_sizes() {
        let fine = Rect::new(1500.0, 1500.0, 2500.0, 2500.0);
        let m = generate_rectangle(&RectangleSpec::new(4000.0, 4000.0, 100.0).refined(fine, 10.0))
            .unwrap();
        for t in 0..m.num_triangles() {
            let c = m.centroid(t);
            let limit = if fine.contains(c) { 10.0 } else { 100.0 };
            assert!(m.cell_size(t) <= limit * (1.0 + 1e-9), "triangle {t}");
            assert!(m.diameter(t) <= limit * 2f64.sqrt() * (1.0 + 1e-9));
        }
        assert!((m.total_area() - 16e6).abs() <= 1e-12 * 16e6);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_rectangle(&RectangleSpec::new(0.0, 1.0, 1.0)).is_err());
        let spec = RectangleSpec::new(10.0, 10.0, 1.0).refined(Rect::new(5.0, 5.0, 11.0, 6.0), 0.5);
        assert!(matches!(generate_rectangle(&spec), Err(MeshError::Generation(_))));
        let spec = RectangleSpec::new(10.0, 10.0, 1.0).refined(Rect::new(5.0, 5.0, 6.0, 6.0), 2.0);
        assert!(generate_rectangle(&spec).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let spec = RectangleSpec::new(3.0, 2.0, 0.7)
            .refined(Rect::new(1.0, 0.5, 2.0, 1.5), 0.1)
            .with_region(Rect::new(1.0, 0.5, 2.0, 1.5), 1);
        let m = generate_rectangle(&spec).unwrap();
        assert_eq!(Mesh::import(&m.export()).unwrap(), m);
    }

    #[test]
    fn negative_area_is_rejected() {
        let doc = "TFMESH 1\nVERTICES 3\n0 0\n1 0\n0 1\nTRIANGLES 1\n0 2 1 0\nBOUNDARY 3\n0 2 a\n2 1 a\n1 0 a\n";
        match Mesh::import(doc) {
            Err(MeshError::Validation { rule, .. }) => assert_eq!(rule, "non-positive area"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_index_is_a_parse_error() {
        let doc = "TFMESH 1\n# comment\nVERTICES 3\n0 0\n1 0\n0 1\nTRIANGLES 1\n0 1 3 0\nBOUNDARY 0\n";
        match Mesh::import(doc) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hanging_vertex_is_rejected() {
        // Vertex 4 sits on the diagonal of the left triangle pair.
        let vertices = vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0], [1.0, 1.0]];
        let triangles = vec![[0, 1, 4], [1, 2, 4], [0, 2, 3]];
        let boundary = [(0, 1), (1, 2), (2, 3), (3, 0)]
            .iter()
            .map(|&(a, b)| BoundaryEdge {
                vertices: [a, b],
                tag: "wall".into(),
            })
            .collect();
        assert!(Mesh::new(vertices, triangles, vec![0; 3], boundary).is_err());
    }

    #[test]
    fn locator_finds_points() {
        let m = generate_rectangle(&RectangleSpec::new(4.0, 2.0, 0.5)).unwrap();
        let loc = m.locator();
        for p in [[0.1, 0.1], [3.9, 1.9], [2.0, 1.0], [4.0, 2.0]] {
            let (t, l) = loc.locate(p).unwrap();
            let tri = m.triangle_points(t);
            let x = l[0] * tri[0][0] + l[1] * tri[1][0] + l[2] * tri[2][0];
            assert!((x - p[0]).abs() < 1e-12);
        }
        assert!(loc.locate([5.0, 1.0]).is_none());
    }

    #[test]
    fn local_bisection_stays_conforming() {
        let spec = RectangleSpec::new(100.0, 60.0, 20.0)
            .refined(Rect::new(30.0, 20.0, 70.0, 40.0), 5.0)
            .with_region(Rect::new(30.0, 20.0, 70.0, 40.0), 1);
        let base = generate_rectangle(&spec).unwrap();
        let centers = [[50.0, 30.0], [31.0, 21.0], [99.0, 1.0]];
        let fine = base
            .refine(
                |m, t| {
                    let c = m.centroid(t);
                    m.equivalent_size(t) > 1.3
                        && centers.iter().any(|p| {
                            ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() < 4.0 + m.diameter(t)
                        })
                },
                20,
            )
            .unwrap();
        assert!(fine.num_triangles() > base.num_triangles());
        assert!((fine.total_area() - base.total_area()).abs() < 1e-9);
        let region_area = |m: &Mesh| -> f64 {
            (0..m.num_triangles()).filter(|&t| m.regions()[t] == 1).map(|t| m.area(t)).sum()
        };
        assert!((region_area(&fine) - region_area(&base)).abs() < 1e-9);
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in fine.triangles() {
            for k in 0..3 {
                *count.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_default() += 1;
            }
        }
        let boundary: BTreeSet<(usize, usize)> = fine
            .boundary_edges()
            .iter()
            .map(|e| edge_key(e.vertices[0], e.vertices[1]))
            .collect();
        for (e, n) in &count {
            assert!(*n == 2 || (*n == 1 && boundary.contains(e)), "edge {e:?} used {n} times");
        }
        assert_eq!(boundary.len(), count.values().filter(|n| **n == 1).count());
        let loc = fine.locator();
        for p in centers {
            let (t, _) = loc.locate(p).unwrap();
            assert!(fine.equivalent_size(t) <= 1.3);
        }
        assert!((0..fine.num_triangles()).all(|t| fine.signed_area(t) > 0.0));
    }
}
