//! Synthetic scenes and the list-domain prior.
//!
//! Every scene is rendered on an 8-bit palette and converted with
//! `v = 2b/255 − 1`, so writing it as PNG and reading it back is lossless.
//! Ground-truth positions are the centroids of the rendered object masks in
//! image pixels (pixel centres at integer coordinates).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::byte_to_unit;
use crate::list::{ObjectEntry, ObjectList};
use crate::seed::derive_seed;
use crate::selection::PatchGeometry;

/// Attempts per requested point in [`poisson_disk`].
const DART_ATTEMPTS: usize = 60;
/// Placement attempts per object before a scene is resampled.
const PLACE_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Tetrominoes,
    Sprites,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Square,
    Triangle,
    Circle,
    Star,
}

impl SpriteShape {
    /// Whether the offset `(dx, dy)` from the sprite centre lies inside a
    /// sprite of half-extent `s`.
    pub fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        match self {
            SpriteShape::Square => dx.abs() <= s && dy.abs() <= s,
            SpriteShape::Circle => dx * dx + dy * dy <= s * s,
            // apex up, base on the bottom edge
            SpriteShape::Triangle => dy <= s && dy >= -s && dx.abs() <= (dy + s) / 2.0,
            SpriteShape::Star => point_in_polygon(dx, dy, &star_polygon(s)),
        }
    }
}

fn star_polygon(s: f64) -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { s } else { 0.45 * s };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// The seven tetrominoes as block offsets `(row, col)` in their base
/// orientation.
const TETROMINOES: [[(i32, i32); 4]; 7] = [
    [(0, 0), (0, 1), (0, 2), (0, 3)], // I
    [(0, 0), (0, 1), (1, 0), (1, 1)], // O
    [(0, 0), (0, 1), (0, 2), (1, 1)], // T
    [(0, 1), (0, 2), (1, 0), (1, 1)], // S
    [(0, 0), (0, 1), (1, 1), (1, 2)], // Z
    [(0, 0), (1, 0), (1, 1), (1, 2)], // J
    [(0, 2), (1, 0), (1, 1), (1, 2)], // L
];

/// Blocks of piece `piece` rotated by `rot` quarter turns, shifted so the
/// minimum row and column are zero.
pub fn tetromino_blocks(piece: usize, rot: usize) -> Vec<(usize, usize)> {
    let mut b: Vec<(i32, i32)> = TETROMINOES[piece].to_vec();
    for _ in 0..rot % 4 {
        b = b.into_iter().map(|(r, c)| (c, -r)).collect();
    }
    let r0 = b.iter().map(|p| p.0).min().unwrap();
    let c0 = b.iter().map(|p| p.1).min().unwrap();
    let mut out: Vec<(usize, usize)> = b
        .into_iter()
        .map(|(r, c)| ((r - r0) as usize, (c - c0) as usize))
        .collect();
    out.sort();
    out
}

/// Everything needed to synthesize one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    /// Rows per list; object counts never exceed it.
    pub k: usize,
    /// Relative frequency of each object count `0, 1, 2, ...`.
    pub count_weights: Vec<f64>,
    /// Poisson-disk minimum distance in pixels.
    pub min_distance: f64,
    pub palette: Vec<[u8; 3]>,
    pub background: [u8; 3],
    /// Tetromino block edge in pixels.
    #[serde(default)]
    pub block: usize,
    #[serde(default)]
    pub shapes: Vec<SpriteShape>,
    /// Sprite half-extents in pixels.
    #[serde(default)]
    pub sizes: Vec<f64>,
}

const TETROMINO_PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 90, 240],
    [240, 220, 40],
    [220, 50, 220],
    [40, 220, 220],
];

impl SceneSpec {
    /// 35×35 scenes with three tetrominoes on black.
    pub fn tetrominoes() -> Self {
        SceneSpec {
            kind: SceneKind::Tetrominoes,
            height: 35,
            width: 35,
            k: 3,
            count_weights: vec![0.0, 0.0, 0.0, 1.0],
            min_distance: 9.0,
            palette: TETROMINO_PALETTE.to_vec(),
            background: [0, 0, 0],
            block: 4,
            shapes: vec![],
            sizes: vec![],
        }
    }

    /// Reduced Tetrominoes for quick training: 32×32, two objects, three
    /// colors, 3-pixel blocks, lists of three rows.
    pub fn mini_tetrominoes() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            count_weights: vec![0.0, 0.0, 1.0],
            min_distance: 7.0,
            palette: TETROMINO_PALETTE[..3].to_vec(),
            block: 3,
            ..Self::tetrominoes()
        }
    }

    /// Up to ten sprites on a 128×128 blue background.
    pub fn sprites() -> Self {
        let mut count_weights = vec![1.0; 11];
        count_weights[0] = 0.0;
        SceneSpec {
            kind: SceneKind::Sprites,
            height: 128,
            width: 128,
            k: 10,
            count_weights,
            min_distance: 22.0,
            palette: vec![
                [230, 40, 40],
                [40, 210, 70],
                [245, 225, 50],
                [250, 250, 250],
                [230, 70, 230],
                [250, 150, 30],
            ],
            background: [20, 40, 160],
            block: 0,
            shapes: vec![
                SpriteShape::Square,
                SpriteShape::Triangle,
                SpriteShape::Circle,
                SpriteShape::Star,
            ],
            sizes: vec![5.0, 7.0, 9.0],
        }
    }

    /// Sprites restricted to three shapes, three colors and three sizes
    /// (27 object types).
    pub fn sprites27() -> Self {
        let base = Self::sprites();
        SceneSpec {
            palette: base.palette[..3].to_vec(),
            shapes: vec![SpriteShape::Square, SpriteShape::Triangle, SpriteShape::Star],
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height == 0 || self.width == 0 || self.k == 0 {
            return bad("scene size and k must be positive".into());
        }
        if !(self.min_distance > 0.0) || !self.min_distance.is_finite() {
            return bad(format!("min_distance must be positive, got {}", self.min_distance));
        }
        if self.count_weights.is_empty()
            || self.count_weights.len() > self.k + 1
            || self.count_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.count_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("count_weights must be non-negative, not all zero, and cover at most k + 1 counts".into());
        }
        if self.palette.is_empty() {
            return bad("palette is empty".into());
        }
        match self.kind {
            SceneKind::Tetrominoes if self.block == 0 || 4 * self.block > self.height.min(self.width) => {
                bad("tetromino block must be positive and fit the image".into())
            }
            SceneKind::Sprites
                if self.shapes.is_empty()
                    || self.sizes.is_empty()
                    || self.sizes.iter().any(|s| !(*s > 0.0) || 2.0 * s >= self.height.min(self.width) as f64) =>
            {
                bad("sprites need shapes and positive sizes that fit the image".into())
            }
            _ => Ok(()),
        }
    }

    /// Half the largest object extent: the margin keeping object centres
    /// away from the border.
    pub fn margin(&self) -> f64 {
        match self.kind {
            SceneKind::Tetrominoes => 2.0 * self.block as f64,
            SceneKind::Sprites => self.sizes.iter().fold(0.0f64, |a, &b| a.max(b)),
        }
    }

    /// Stable digest of the spec's JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn sample_count<R: Rng>(&self, rng: &mut R) -> usize {
        let total: f64 = self.count_weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, &w) in self.count_weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        self.count_weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

/// Dart throwing: uniform candidates inside `[margin, extent − 1 − margin]`,
/// accepted when at least `r` from every accepted point. Stops at `max_n`
/// points or after `DART_ATTEMPTS · max_n` candidates.
pub fn poisson_disk<R: Rng>(h: usize, w: usize, r: f64, margin: f64, max_n: usize, rng: &mut R) -> Vec<(f64, f64)> {
    let (x_hi, y_hi) = (w as f64 - 1.0 - margin, h as f64 - 1.0 - margin);
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(max_n);
    if x_hi < margin || y_hi < margin {
        return pts;
    }
    for _ in 0..DART_ATTEMPTS * max_n {
        if pts.len() == max_n {
            break;
        }
        let p = (rng.random_range(margin..=x_hi), rng.random_range(margin..=y_hi));
        if pts.iter().all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= r) {
            pts.push(p);
        }
    }
    pts
}

/// Attribute labels of one rendered object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectLabel {
    /// Tetromino piece index or sprite shape index.
    pub shape: usize,
    pub color: usize,
    /// Sprite size index; tetromino rotation.
    pub size: usize,
}

impl ObjectLabel {
    /// Dense type id over `(shape, color, size)`.
    pub fn type_id(&self, spec: &SceneSpec) -> usize {
        let sizes = match spec.kind {
            SceneKind::Tetrominoes => 1,
            SceneKind::Sprites => spec.sizes.len(),
        };
        let size = if spec.kind == SceneKind::Tetrominoes { 0 } else { self.size };
        (self.shape * spec.palette.len() + self.color) * sizes + size
    }
}

/// One ground-truth row. Positions are image pixels; inactive rows have
/// `alpha = 0` and no label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub label: Option<ObjectLabel>,
}

/// A rendered scene with its true list of exactly `k` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthScene {
    pub image: ImageTensor,
    pub rows: Vec<GroundTruthRow>,
    /// Per-pixel object index (`None` for background), row-major.
    pub masks: Vec<Option<usize>>,
}

/// Sidecar JSON record of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<GroundTruthRow>,
}

impl GroundTruthRecord {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let r: GroundTruthRecord = serde_json::from_slice(bytes)?;
        if r.height == 0 || r.width == 0 {
            return Err(Error::InvalidArgument("ground truth with empty image".into()));
        }
        if r.rows.iter().any(|row| !(row.x.is_finite() && row.y.is_finite() && (0.0..=1.0).contains(&row.alpha))) {
            return Err(Error::InvalidArgument("ground-truth rows must be finite with alpha in [0, 1]".into()));
        }
        Ok(r)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("record serializes")
    }

    pub fn active(&self) -> impl Iterator<Item = &GroundTruthRow> {
        self.rows.iter().filter(|r| r.alpha > 0.5)
    }
}

impl GroundTruthScene {
    pub fn record(&self) -> GroundTruthRecord {
        GroundTruthRecord {
            height: self.image.height,
            width: self.image.width,
            rows: self.rows.clone(),
        }
    }

    pub fn object_count(&self) -> usize {
        self.rows.iter().filter(|r| r.alpha == 1.0).count()
    }

    /// True list normalized over the padded image of `geometry`; η is empty.
    pub fn true_list(&self, geometry: &PatchGeometry) -> ObjectList {
        rows_to_list(&self.rows, geometry)
    }
}

pub fn rows_to_list(rows: &[GroundTruthRow], geometry: &PatchGeometry) -> ObjectList {
    ObjectList::new(
        rows.iter()
            .map(|r| {
                let (x, y) = geometry.from_image_pixels(r.x, r.y);
                ObjectEntry::new(x, y, r.alpha, vec![])
            })
            .collect(),
    )
}

struct Canvas {
    h: usize,
    w: usize,
    bytes: Vec<[u8; 3]>,
    owner: Vec<Option<usize>>,
}

impl Canvas {
    fn new(h: usize, w: usize, bg: [u8; 3]) -> Self {
        Canvas {
            h,
            w,
            bytes: vec![bg; h * w],
            owner: vec![None; h * w],
        }
    }

    fn paint(&mut self, pixels: &[(usize, usize)], color: [u8; 3], id: usize) {
        for &(y, x) in pixels {
            self.bytes[y * self.w + x] = color;
            self.owner[y * self.w + x] = Some(id);
        }
    }

    fn into_scene(self, rows: Vec<GroundTruthRow>) -> GroundTruthScene {
        let data = self.bytes.iter().flat_map(|p| p.iter().map(|&b| byte_to_unit(b))).collect();
        GroundTruthScene {
            image: ImageTensor::new(self.h, self.w, 3, data).expect("canvas shape"),
            rows,
            masks: self.owner,
        }
    }
}

fn centroid(pixels: &[(usize, usize)]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let sx: f64 = pixels.iter().map(|p| p.1 as f64).sum();
    let sy: f64 = pixels.iter().map(|p| p.0 as f64).sum();
    (sx / n, sy / n)
}

/// Inactive rows: `alpha = 0` at uniform positions.
fn pad_rows<R: Rng>(rows: &mut Vec<GroundTruthRow>, spec: &SceneSpec, rng: &mut R) {
    while rows.len() < spec.k {
        rows.push(GroundTruthRow {
            x: rng.random_range(0.0..=(spec.width - 1) as f64),
            y: rng.random_range(0.0..=(spec.height - 1) as f64),
            alpha: 0.0,
            label: None,
        });
    }
}

/// Tetromino scene: objects are placed one by one at random positions,
/// rejecting placements that overlap or 4-touch an earlier piece.
pub fn gen_tetrominoes<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<GroundTruthScene> {
    spec.validate()?;
    let count = spec.sample_count(rng);
    'scene: loop {
        let mut canvas = Canvas::new(spec.height, spec.width, spec.background);
        let mut rows = Vec::with_capacity(spec.k);
        for id in 0..count {
            let piece = rng.random_range(0..TETROMINOES.len());
            let rot = rng.random_range(0..4);
            let color = rng.random_range(0..spec.palette.len());
            let blocks = tetromino_blocks(piece, rot);
            let bh = blocks.iter().map(|b| b.0).max().unwrap() + 1;
            let bw = blocks.iter().map(|b| b.1).max().unwrap() + 1;
            let (ph, pw) = (bh * spec.block, bw * spec.block);
            let mut placed = None;
            for _ in 0..PLACE_ATTEMPTS {
                let y0 = rng.random_range(0..=spec.height - ph);
                let x0 = rng.random_range(0..=spec.width - pw);
                let pixels: Vec<(usize, usize)> = blocks
                    .iter()
                    .flat_map(|&(br, bc)| {
                        (0..spec.block).flat_map(move |dy| {
                            (0..spec.block).map(move |dx| (y0 + br * spec.block + dy, x0 + bc * spec.block + dx))
                        })
                    })
                    .collect();
                let clear = pixels.iter().all(|&(y, x)| {
                    let near = [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)];
                    near.iter().all(|&(dy, dx)| {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        yy < 0
                            || xx < 0
                            || yy >= spec.height as i64
                            || xx >= spec.width as i64
                            || canvas.owner[yy as usize * spec.width + xx as usize].is_none()
                    })
                });
                if clear {
                    placed = Some(pixels);
                    break;
                }
            }
            let Some(pixels) = placed else {
                continue 'scene;
            };
            canvas.paint(&pixels, spec.palette[color], id);
            let (x, y) = centroid(&pixels);
            rows.push(GroundTruthRow {
                x,
                y,
                alpha: 1.0,
                label: Some(ObjectLabel {
                    shape: piece,
                    color,
                    size: rot,
                }),
            });
        }
        pad_rows(&mut rows, spec, rng);
        return Ok(canvas.into_scene(rows));
    }
}

/// Sprite scene: Poisson-disk centres, one random shape, color and size per
/// sprite. Fewer sprites are drawn when the disk sampler runs out of room.
pub fn gen_sprites<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<GroundTruthScene> {
    spec.validate()?;
    let count = spec.sample_count(rng);
    let centres = poisson_disk(spec.height, spec.width, spec.min_distance, spec.margin(), count, rng);
    let mut canvas = Canvas::new(spec.height, spec.width, spec.background);
    let mut rows = Vec::with_capacity(spec.k);
    for (id, &(cx, cy)) in centres.iter().enumerate() {
        let shape = rng.random_range(0..spec.shapes.len());
        let color = rng.random_range(0..spec.palette.len());
        let size = rng.random_range(0..spec.sizes.len());
        let s = spec.sizes[size];
        let kind = spec.shapes[shape];
        let (y_lo, y_hi) = ((cy - s).floor().max(0.0) as usize, ((cy + s).ceil() as usize).min(spec.height - 1));
        let (x_lo, x_hi) = ((cx - s).floor().max(0.0) as usize, ((cx + s).ceil() as usize).min(spec.width - 1));
        let pixels: Vec<(usize, usize)> = (y_lo..=y_hi)
            .flat_map(|y| (x_lo..=x_hi).map(move |x| (y, x)))
            .filter(|&(y, x)| kind.contains(x as f64 - cx, y as f64 - cy, s))
            .collect();
        if pixels.is_empty() {
            continue;
        }
        canvas.paint(&pixels, spec.palette[color], id);
        let (x, y) = centroid(&pixels);
        rows.push(GroundTruthRow {
            x,
            y,
            alpha: 1.0,
            label: Some(ObjectLabel { shape, color, size }),
        });
    }
    pad_rows(&mut rows, spec, rng);
    Ok(canvas.into_scene(rows))
}

pub fn gen_scene<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<GroundTruthScene> {
    match spec.kind {
        SceneKind::Tetrominoes => gen_tetrominoes(spec, rng),
        SceneKind::Sprites => gen_sprites(spec, rng),
    }
}

/// Scene `index` of the dataset rooted at `seed`.
pub fn scene_at(spec: &SceneSpec, seed: u64, index: u64) -> Result<GroundTruthScene> {
    gen_scene(spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index])))
}

/// Unpaired list-domain sample: Poisson-disk positions for the active rows
/// (α = 1), uniform positions for the `α = 0` rows, uniform `η`. Positions
/// are normalized over the padded image of `geometry`. Rows are shuffled.
pub fn sample_list_prior<R: Rng>(
    spec: &SceneSpec,
    geometry: &PatchGeometry,
    eta_dim: usize,
    rng: &mut R,
) -> Result<ObjectList> {
    spec.validate()?;
    let count = spec.sample_count(rng);
    let pts = poisson_disk(spec.height, spec.width, spec.min_distance, spec.margin(), count, rng);
    let mut rows: Vec<GroundTruthRow> = pts
        .into_iter()
        .map(|(x, y)| GroundTruthRow {
            x,
            y,
            alpha: 1.0,
            label: None,
        })
        .collect();
    pad_rows(&mut rows, spec, rng);
    let mut list = rows_to_list(&rows, geometry);
    for e in &mut list.entries {
        e.eta = (0..eta_dim).map(|_| rng.random::<f64>()).collect();
    }
    list.entries.shuffle(rng);
    Ok(list)
}

/// Dataset manifest: regenerates identical scenes from `(seed, spec)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub count: u64,
    pub spec: SceneSpec,
    pub spec_digest: String,
}

impl Manifest {
    pub fn new(spec: SceneSpec, seed: u64, count: u64) -> Self {
        Manifest {
            spec_digest: spec.digest(),
            spec,
            seed,
            count,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes)?;
        m.spec.validate()?;
        if m.spec.digest() != m.spec_digest {
            return Err(Error::InvalidArgument("manifest digest does not match its spec".into()));
        }
        Ok(m)
    }
}
