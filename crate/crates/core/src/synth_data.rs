//! Deterministic procedural world: colored shapes on a 4x4 grid, rendered to
//! 32x32 RGB images, captioned by a closed grammar, and edited by four
//! primitive instructions. Because the world is symbolic, every downstream
//! metric has an exact oracle: images parse back to scenes, captions parse
//! back to scenes, and edit instructions can be applied symbolically.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRID: usize = 4;
pub const CELL_PX: usize = 8;
pub const IMAGE_PX: usize = GRID * CELL_PX;
pub const MAX_OBJECTS: usize = 3;

const BACKGROUND: [u8; 3] = [28, 28, 28];

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("scene must have between 1 and {MAX_OBJECTS} objects, got {0}")]
    ObjectCount(usize),
    #[error("two objects share cell ({0}, {1})")]
    DuplicateCell(usize, usize),
    #[error("cell out of range: ({0}, {1})")]
    CellRange(usize, usize),
    #[error("cell ({0}, {1}) did not match any template closely enough")]
    Unparseable(usize, usize),
    #[error("image has wrong dimensions")]
    BadImage,
    #[error("cannot parse caption: {0}")]
    BadCaption(String),
    #[error("cannot parse instruction: {0}")]
    BadInstruction(String),
    #[error("instruction not applicable: {0}")]
    NotApplicable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

impl Shape {
    pub fn word(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Shape> {
        SHAPES.iter().copied().find(|s| s.word() == w)
    }
}

impl Color {
    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Color> {
        COLORS.iter().copied().find(|c| c.word() == w)
    }

    pub fn rgb(&self) -> [u8; 3] {
        match self {
            Color::Red => [230, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 90, 235],
            Color::Yellow => [235, 220, 50],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub cell: (usize, usize),
}

/// Symbolic ground truth for one image. Objects are kept in row-major cell
/// order so equality is set equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    objects: Vec<Object>,
}

impl Scene {
    pub fn new(mut objects: Vec<Object>) -> Result<Scene, WorldError> {
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(WorldError::ObjectCount(objects.len()));
        }
        for o in &objects {
            if o.cell.0 >= GRID || o.cell.1 >= GRID {
                return Err(WorldError::CellRange(o.cell.0, o.cell.1));
            }
        }
        objects.sort_by_key(|o| o.cell);
        for w in objects.windows(2) {
            if w[0].cell == w[1].cell {
                return Err(WorldError::DuplicateCell(w[0].cell.0, w[0].cell.1));
            }
        }
        Ok(Scene { objects })
    }

    /// The all-background scene; only the renderer and its tests use this.
    pub fn empty() -> Scene {
        Scene { objects: Vec::new() }
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn occupied(&self, cell: (usize, usize)) -> bool {
        self.objects.iter().any(|o| o.cell == cell)
    }

    pub fn count_shape(&self, shape: Shape) -> usize {
        self.objects.iter().filter(|o| o.shape == shape).count()
    }
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn solid(size: usize, rgb: [u8; 3]) -> Image {
        let mut pixels = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            pixels.extend_from_slice(&rgb);
        }
        Image { size, pixels }
    }

    #[inline]
    pub fn px(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.size + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_px(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = (r * self.size + c) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Normalized [0,1] f64 view, RGB interleaved.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn from_f64(size: usize, data: &[f64]) -> Image {
        let pixels = data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Image { size, pixels }
    }

    /// Mean absolute pixel difference, normalized to [0,1].
    pub fn l1(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        let s: f64 = self
            .pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(&a, &b)| ((a as f64) - (b as f64)).abs())
            .sum();
        s / (self.pixels.len() as f64 * 255.0)
    }
}

/// Shape footprint inside the 4x4 drawable interior of a cell (2px margin).
fn footprint(shape: Shape) -> [[bool; 4]; 4] {
    match shape {
        Shape::Square => [[true; 4]; 4],
        Shape::Circle => [
            [false, true, true, false],
            [true, true, true, true],
            [true, true, true, true],
            [false, true, true, false],
        ],
        Shape::Triangle => [
            [true, false, false, false],
            [true, true, false, false],
            [true, true, true, false],
            [true, true, true, true],
        ],
    }
}

/// Pure rasterizer: background fill, each object drawn inside its cell with a
/// 2-pixel margin.
pub fn render(scene: &Scene) -> Image {
    let mut img = Image::solid(IMAGE_PX, BACKGROUND);
    for o in scene.objects() {
        let fp = footprint(o.shape);
        let base_r = o.cell.0 * CELL_PX + 2;
        let base_c = o.cell.1 * CELL_PX + 2;
        for (dr, row) in fp.iter().enumerate() {
            for (dc, &on) in row.iter().enumerate() {
                if on {
                    img.set_px(base_r + dr, base_c + dc, o.color.rgb());
                }
            }
        }
    }
    img
}

const CELL_WORDS: [&str; 4] = ["one", "two", "three", "four"];

/// Fixed 16-entry cell-name table: idiomatic names for the corners,
/// "row R column C" elsewhere.
pub fn cell_name(cell: (usize, usize)) -> String {
    match cell {
        (0, 0) => "top left".to_string(),
        (0, 3) => "top right".to_string(),
        (3, 0) => "bottom left".to_string(),
        (3, 3) => "bottom right".to_string(),
        (r, c) => format!("row {} column {}", CELL_WORDS[r], CELL_WORDS[c]),
    }
}

pub fn cell_from_name(words: &[&str]) -> Option<((usize, usize), usize)> {
    match words {
        ["top", "left", ..] => Some(((0, 0), 2)),
        ["top", "right", ..] => Some(((0, 3), 2)),
        ["bottom", "left", ..] => Some(((3, 0), 2)),
        ["bottom", "right", ..] => Some(((3, 3), 2)),
        ["row", r, "column", c, ..] => {
            let ri = CELL_WORDS.iter().position(|w| w == r)?;
            let ci = CELL_WORDS.iter().position(|w| w == c)?;
            Some(((ri, ci), 4))
        }
        _ => None,
    }
}

/// Canonical caption: objects in row-major cell order,
/// "a <color> <shape> at <cell>" joined by "and".
pub fn caption(scene: &Scene) -> String {
    scene
        .objects()
        .iter()
        .map(|o| format!("a {} {} at {}", o.color.word(), o.shape.word(), cell_name(o.cell)))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Inverse of `caption` on its own output.
pub fn parse_caption(text: &str) -> Result<Scene, WorldError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(WorldError::BadCaption("empty".into()));
    }
    let mut objects = Vec::new();
    let mut i = 0;
    loop {
        if words.get(i) != Some(&"a") {
            return Err(WorldError::BadCaption(format!("expected `a` at word {i}")));
        }
        let color = words
            .get(i + 1)
            .and_then(|w| Color::from_word(w))
            .ok_or_else(|| WorldError::BadCaption("bad color".into()))?;
        let shape = words
            .get(i + 2)
            .and_then(|w| Shape::from_word(w))
            .ok_or_else(|| WorldError::BadCaption("bad shape".into()))?;
        if words.get(i + 3) != Some(&"at") {
            return Err(WorldError::BadCaption("expected `at`".into()));
        }
        let (cell, used) = cell_from_name(&words[i + 4..])
            .ok_or_else(|| WorldError::BadCaption("bad cell name".into()))?;
        objects.push(Object { shape, color, cell });
        i += 4 + used;
        if i == words.len() {
            break;
        }
        if words.get(i) != Some(&"and") {
            return Err(WorldError::BadCaption("expected `and`".into()));
        }
        i += 1;
    }
    Scene::new(objects)
}

/// Per-cell nearest-template classifier; inverse of `render` on clean images.
/// A cell whose best template distance exceeds `threshold` (mean absolute
/// intensity per pixel-channel, 0-255 scale) is reported unparseable.
pub struct ImageParser {
    templates: Vec<(Option<(Shape, Color)>, Vec<u8>)>,
    pub threshold: f64,
}

impl Default for ImageParser {
    fn default() -> Self {
        Self::new(40.0)
    }
}

impl ImageParser {
    pub fn new(threshold: f64) -> ImageParser {
        let mut templates = Vec::new();
        templates.push((None, cell_pixels_of(None)));
        for &s in &SHAPES {
            for &c in &COLORS {
                templates.push((Some((s, c)), cell_pixels_of(Some((s, c)))));
            }
        }
        ImageParser { templates, threshold }
    }

    pub fn parse(&self, image: &Image) -> Result<Scene, WorldError> {
        if image.size != IMAGE_PX || image.pixels.len() != IMAGE_PX * IMAGE_PX * 3 {
            return Err(WorldError::BadImage);
        }
        let mut objects = Vec::new();
        for r in 0..GRID {
            for c in 0..GRID {
                let cell = cell_pixels(image, r, c);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, (_, t)) in self.templates.iter().enumerate() {
                    let d = mad(&cell, t);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                if best_d > self.threshold {
                    return Err(WorldError::Unparseable(r, c));
                }
                if let Some((shape, color)) = self.templates[best].0 {
                    objects.push(Object { shape, color, cell: (r, c) });
                }
            }
        }
        if objects.is_empty() {
            Ok(Scene::empty())
        } else if objects.len() <= MAX_OBJECTS {
            Scene::new(objects)
        } else {
            // More drawn cells than a valid scene allows; report the first
            // offending cell as unparseable.
            Err(WorldError::Unparseable(objects[MAX_OBJECTS].cell.0, objects[MAX_OBJECTS].cell.1))
        }
    }

    /// Smallest mean-absolute distance between any two distinct templates;
    /// classification is exact for perturbations below half of this.
    pub fn min_template_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.templates.len() {
            for j in i + 1..self.templates.len() {
                best = best.min(mad(&self.templates[i].1, &self.templates[j].1));
            }
        }
        best
    }
}

fn cell_pixels(image: &Image, r: usize, c: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(CELL_PX * CELL_PX * 3);
    for dr in 0..CELL_PX {
        for dc in 0..CELL_PX {
            out.extend_from_slice(&image.px(r * CELL_PX + dr, c * CELL_PX + dc));
        }
    }
    out
}

fn cell_pixels_of(content: Option<(Shape, Color)>) -> Vec<u8> {
    let scene = match content {
        None => Scene::empty(),
        Some((s, c)) => {
            Scene::new(vec![Object { shape: s, color: c, cell: (0, 0) }]).expect("valid")
        }
    };
    cell_pixels(&render(&scene), 0, 0)
}

fn mad(a: &[u8], b: &[u8]) -> f64 {
    let s: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| ((x as f64) - (y as f64)).abs()).sum();
    s / a.len() as f64
}

// ---------------------------------------------------------------------------
// Edits
// ---------------------------------------------------------------------------

/// Source scene, a grammar instruction, and the scene the instruction
/// denotes. The target always differs from the source by exactly one
/// primitive edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub source: Scene,
    pub instruction: String,
    pub target: Scene,
}

/// Refer to a shape unambiguously: by shape alone when the scene has exactly
/// one, otherwise by shape plus cell.
fn referent(scene: &Scene, obj: &Object) -> String {
    if scene.count_shape(obj.shape) == 1 {
        format!("the {}", obj.shape.word())
    } else {
        format!("the {} at {}", obj.shape.word(), cell_name(obj.cell))
    }
}

/// Parse and apply an edit instruction symbolically. Supports the four
/// primitive edits plus the identity instruction "keep the image the same".
pub fn apply_instruction(scene: &Scene, instruction: &str) -> Result<Scene, WorldError> {
    let words: Vec<&str> = instruction.split_whitespace().collect();
    let bad = || WorldError::BadInstruction(instruction.to_string());
    let resolve = |words: &[&str]| -> Result<(Object, usize), WorldError> {
        // "the <shape> [at <cell>]"
        if words.first() != Some(&"the") {
            return Err(bad());
        }
        let shape = words.get(1).and_then(|w| Shape::from_word(w)).ok_or_else(bad)?;
        if words.get(2) == Some(&"at") {
            if let Some((cell, used)) = cell_from_name(&words[3..]) {
                let obj = scene
                    .objects()
                    .iter()
                    .find(|o| o.shape == shape && o.cell == cell)
                    .copied()
                    .ok_or_else(|| WorldError::NotApplicable(instruction.to_string()))?;
                return Ok((obj, 3 + used));
            }
        }
        let matches: Vec<&Object> =
            scene.objects().iter().filter(|o| o.shape == shape).collect();
        match matches.len() {
            1 => Ok((*matches[0], 2)),
            0 => Err(WorldError::NotApplicable(instruction.to_string())),
            _ => Err(WorldError::BadInstruction(format!("ambiguous referent: {instruction}"))),
        }
    };

    match words.as_slice() {
        ["keep", "the", "image", "the", "same"] => Ok(scene.clone()),
        ["change", rest @ ..] => {
            let (obj, used) = resolve(rest)?;
            let tail = &rest[used..];
            let color = match tail {
                ["to", w] => Color::from_word(w).ok_or_else(bad)?,
                _ => return Err(bad()),
            };
            if color == obj.color {
                return Err(WorldError::NotApplicable(instruction.to_string()));
            }
            let objects = scene
                .objects()
                .iter()
                .map(|o| if *o == obj { Object { color, ..*o } } else { *o })
                .collect();
            Scene::new(objects)
        }
        ["move", rest @ ..] => {
            let (obj, used) = resolve(rest)?;
            let tail = &rest[used..];
            if tail.first() != Some(&"to") {
                return Err(bad());
            }
            let (cell, _) = cell_from_name(&tail[1..]).ok_or_else(bad)?;
            if scene.occupied(cell) {
                return Err(WorldError::NotApplicable(instruction.to_string()));
            }
            let objects = scene
                .objects()
                .iter()
                .map(|o| if *o == obj { Object { cell, ..*o } } else { *o })
                .collect();
            Scene::new(objects)
        }
        ["add", "a", color, shape, "at", rest @ ..] => {
            let color = Color::from_word(color).ok_or_else(bad)?;
            let shape = Shape::from_word(shape).ok_or_else(bad)?;
            let (cell, _) = cell_from_name(rest).ok_or_else(bad)?;
            if scene.occupied(cell) || scene.objects().len() >= MAX_OBJECTS {
                return Err(WorldError::NotApplicable(instruction.to_string()));
            }
            let mut objects = scene.objects().to_vec();
            objects.push(Object { shape, color, cell });
            Scene::new(objects)
        }
        ["remove", rest @ ..] => {
            let (obj, _) = resolve(rest)?;
            let objects: Vec<Object> =
                scene.objects().iter().filter(|o| **o != obj).copied().collect();
            if objects.is_empty() {
                return Err(WorldError::NotApplicable(instruction.to_string()));
            }
            Scene::new(objects)
        }
        _ => Err(bad()),
    }
}

/// Sample one valid primitive edit of the scene. Deterministic under `rng`.
pub fn make_edit(scene: &Scene, rng: &mut ChaCha8Rng) -> EditPair {
    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        Recolor,
        Move,
        Add,
        Remove,
    }
    let mut kinds = vec![Kind::Recolor, Kind::Move];
    if scene.objects().len() < MAX_OBJECTS {
        kinds.push(Kind::Add);
    }
    if scene.objects().len() >= 2 {
        kinds.push(Kind::Remove);
    }
    let kind = *kinds.choose(rng).expect("non-empty");
    let free_cells: Vec<(usize, usize)> = (0..GRID)
        .flat_map(|r| (0..GRID).map(move |c| (r, c)))
        .filter(|&cell| !scene.occupied(cell))
        .collect();

    let instruction = match kind {
        Kind::Recolor => {
            let obj = *scene.objects().choose(rng).expect("non-empty scene");
            let choices: Vec<Color> =
                COLORS.iter().copied().filter(|&c| c != obj.color).collect();
            let color = *choices.choose(rng).unwrap();
            format!("change {} to {}", referent(scene, &obj), color.word())
        }
        Kind::Move => {
            let obj = *scene.objects().choose(rng).expect("non-empty scene");
            let cell = *free_cells.choose(rng).expect("grid never full");
            format!("move {} to {}", referent(scene, &obj), cell_name(cell))
        }
        Kind::Add => {
            let shape = *SHAPES.choose(rng).unwrap();
            let color = *COLORS.choose(rng).unwrap();
            let cell = *free_cells.choose(rng).unwrap();
            format!("add a {} {} at {}", color.word(), shape.word(), cell_name(cell))
        }
        Kind::Remove => {
            let obj = *scene.objects().choose(rng).expect("non-empty scene");
            format!("remove {}", referent(scene, &obj))
        }
    };
    let target = apply_instruction(scene, &instruction).expect("generated edit applies");
    EditPair { source: scene.clone(), instruction, target }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic split by scene identity: 80/10/10 by hash bucket, so splits
/// never share a scene no matter how samples were drawn.
pub fn split_of(scene: &Scene) -> Split {
    let mut h: u64 = 0xcbf29ce484222325;
    for o in scene.objects() {
        for b in [o.shape as u8, o.color as u8, o.cell.0 as u8, o.cell.1 as u8] {
            h ^= b as u64 + 1;
            h = h.wrapping_mul(0x100000001b3);
        }
        h = h.wrapping_mul(0x100000001b3);
    }
    match h % 20 {
        0..=15 => Split::Train,
        16 | 17 => Split::Val,
        _ => Split::Test,
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.gen_range(1..=MAX_OBJECTS);
    let mut cells: Vec<(usize, usize)> =
        (0..GRID).flat_map(|r| (0..GRID).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    let objects = (0..n)
        .map(|i| Object {
            shape: *SHAPES.choose(rng).unwrap(),
            color: *COLORS.choose(rng).unwrap(),
            cell: cells[i],
        })
        .collect();
    Scene::new(objects).expect("sampled scene valid")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub scene: Scene,
    pub caption: String,
}

/// `n` captioned scenes from the given split. Same (n, seed, split) always
/// produces the same list.
pub fn gen_dataset(n: usize, seed: u64, split: Split) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let scene = random_scene(&mut rng);
        if split_of(&scene) == split {
            let caption = caption(&scene);
            out.push(Sample { scene, caption });
        }
    }
    out
}

/// `n` edit pairs whose source scenes come from the given split.
pub fn gen_edit_dataset(n: usize, seed: u64, split: Split) -> Vec<EditPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xed17);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let scene = random_scene(&mut rng);
        if split_of(&scene) == split {
            out.push(make_edit(&scene, &mut rng));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Two-image QA (instruction-tuning task)
// ---------------------------------------------------------------------------

/// A question about a pair of scenes with a single-word answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaSample {
    pub first: Scene,
    pub second: Scene,
    pub question: String,
    pub answer: String,
}

pub fn make_qa(first: &Scene, second: &Scene, rng: &mut ChaCha8Rng) -> QaSample {
    let which = rng.gen_bool(0.5);
    let (name, scene) = if which { ("first", first) } else { ("second", second) };
    // Prefer a color question when some shape is unique; fall back to count.
    let unique: Vec<&Object> =
        scene.objects().iter().filter(|o| scene.count_shape(o.shape) == 1).collect();
    if !unique.is_empty() && rng.gen_bool(0.6) {
        let obj = unique[rng.gen_range(0..unique.len())];
        QaSample {
            first: first.clone(),
            second: second.clone(),
            question: format!("what color is the {} in the {} image", obj.shape.word(), name),
            answer: obj.color.word().to_string(),
        }
    } else {
        let count_word = ["one", "two", "three"][scene.objects().len() - 1];
        QaSample {
            first: first.clone(),
            second: second.clone(),
            question: format!("how many objects are in the {} image", name),
            answer: count_word.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scene(spec: &[(Shape, Color, (usize, usize))]) -> Scene {
        Scene::new(
            spec.iter().map(|&(shape, color, cell)| Object { shape, color, cell }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn empty_scene_renders_background_only() {
        let img = render(&Scene::empty());
        for r in 0..IMAGE_PX {
            for c in 0..IMAGE_PX {
                assert_eq!(img.px(r, c), BACKGROUND);
            }
        }
    }

    #[test]
    fn render_is_pure() {
        let s = scene(&[(Shape::Circle, Color::Red, (0, 0)), (Shape::Square, Color::Blue, (2, 3))]);
        assert_eq!(render(&s), render(&s));
    }

    #[test]
    fn red_circle_colors_only_its_cell() {
        let s = scene(&[(Shape::Circle, Color::Red, (0, 0))]);
        let img = render(&s);
        let mut red_in_cell = 0;
        for r in 0..IMAGE_PX {
            for c in 0..IMAGE_PX {
                let px = img.px(r, c);
                if px == Color::Red.rgb() {
                    assert!(r < CELL_PX && c < CELL_PX, "red pixel outside cell (0,0)");
                    red_in_cell += 1;
                } else {
                    assert_eq!(px, BACKGROUND);
                }
            }
        }
        assert_eq!(red_in_cell, 12); // circle footprint
    }

    #[test]
    fn margin_respected() {
        for &s in &SHAPES {
            let sc = scene(&[(s, Color::Green, (1, 1))]);
            let img = render(&sc);
            for dr in 0..CELL_PX {
                for dc in 0..CELL_PX {
                    let border = dr < 2 || dr >= CELL_PX - 2 || dc < 2 || dc >= CELL_PX - 2;
                    if border {
                        assert_eq!(img.px(CELL_PX + dr, CELL_PX + dc), BACKGROUND);
                    }
                }
            }
        }
    }

    #[test]
    fn caption_examples() {
        assert_eq!(
            caption(&scene(&[(Shape::Circle, Color::Red, (0, 0))])),
            "a red circle at top left"
        );
        let two = scene(&[
            (Shape::Square, Color::Blue, (3, 3)),
            (Shape::Circle, Color::Red, (0, 0)),
        ]);
        let text = caption(&two);
        assert!(text.starts_with("a red circle at top left and"), "row-major order: {text}");
        assert!(text.ends_with("a blue square at bottom right"));
    }

    #[test]
    fn caption_injective_over_one_object_scenes() {
        let mut seen = std::collections::HashSet::new();
        for &shape in &SHAPES {
            for &color in &COLORS {
                for r in 0..GRID {
                    for c in 0..GRID {
                        let s = scene(&[(shape, color, (r, c))]);
                        let text = caption(&s);
                        assert!(seen.insert(text.clone()), "duplicate caption {text}");
                        assert_eq!(parse_caption(&text).unwrap(), s);
                    }
                }
            }
        }
        assert_eq!(seen.len(), 3 * 4 * 16);
    }

    #[test]
    fn parse_image_inverts_render_randomly() {
        let parser = ImageParser::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let s = random_scene(&mut rng);
            assert_eq!(parser.parse(&render(&s)).unwrap(), s);
        }
    }

    #[test]
    fn parse_image_of_background_is_empty_scene() {
        let parser = ImageParser::default();
        let img = Image::solid(IMAGE_PX, BACKGROUND);
        assert_eq!(parser.parse(&img).unwrap(), Scene::empty());
    }

    #[test]
    fn parse_image_tolerates_unit_noise() {
        let parser = ImageParser::default();
        // +-1 noise shifts a cell by at most 1 intensity level per channel;
        // templates sit several levels apart, so classification is unchanged.
        assert!(parser.min_template_separation() > 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let s = random_scene(&mut rng);
            let mut img = render(&s);
            for b in img.pixels.iter_mut() {
                let delta: i16 = rand::Rng::gen_range(&mut rng, -1..=1);
                *b = (*b as i16 + delta).clamp(0, 255) as u8;
            }
            assert_eq!(parser.parse(&img).unwrap(), s);
        }
    }

    #[test]
    fn garbage_image_is_unparseable() {
        let parser = ImageParser::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = Image::solid(IMAGE_PX, BACKGROUND);
        for b in img.pixels.iter_mut() {
            *b = rand::Rng::gen(&mut rng);
        }
        assert!(matches!(parser.parse(&img), Err(WorldError::Unparseable(_, _))));
    }

    #[test]
    fn recolor_edit_semantics() {
        let s = scene(&[(Shape::Circle, Color::Red, (1, 2))]);
        let t = apply_instruction(&s, "change the circle to blue").unwrap();
        assert_eq!(t, scene(&[(Shape::Circle, Color::Blue, (1, 2))]));
    }

    #[test]
    fn identity_instruction_is_noop() {
        let s = scene(&[(Shape::Triangle, Color::Yellow, (2, 2))]);
        assert_eq!(apply_instruction(&s, "keep the image the same").unwrap(), s);
    }

    #[test]
    fn edits_apply_to_their_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..500 {
            let s = random_scene(&mut rng);
            let pair = make_edit(&s, &mut rng);
            assert_ne!(pair.source, pair.target);
            assert_eq!(apply_instruction(&pair.source, &pair.instruction).unwrap(), pair.target);
        }
    }

    #[test]
    fn datasets_are_deterministic_and_split_disjoint() {
        let a = gen_dataset(300, 5, Split::Train);
        let b = gen_dataset(300, 5, Split::Train);
        assert_eq!(
            a.iter().map(|s| s.caption.clone()).collect::<Vec<_>>(),
            b.iter().map(|s| s.caption.clone()).collect::<Vec<_>>()
        );
        let train: std::collections::HashSet<Scene> =
            gen_dataset(500, 5, Split::Train).into_iter().map(|s| s.scene).collect();
        let val: std::collections::HashSet<Scene> =
            gen_dataset(200, 6, Split::Val).into_iter().map(|s| s.scene).collect();
        let test: std::collections::HashSet<Scene> =
            gen_dataset(200, 7, Split::Test).into_iter().map(|s| s.scene).collect();
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
    }

    #[test]
    fn qa_answers_are_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let a = random_scene(&mut rng);
            let b = random_scene(&mut rng);
            let qa = make_qa(&a, &b, &mut rng);
            let scene = if qa.question.contains("first") { &qa.first } else { &qa.second };
            if qa.question.starts_with("how many") {
                let expect = ["one", "two", "three"][scene.objects().len() - 1];
                assert_eq!(qa.answer, expect);
            } else {
                let shape_word = qa.question.split_whitespace().nth(4).unwrap();
                let shape = Shape::from_word(shape_word).unwrap();
                let obj = scene.objects().iter().find(|o| o.shape == shape).unwrap();
                assert_eq!(qa.answer, obj.color.word());
            }
        }
    }

    proptest! {
        #[test]
        fn caption_round_trips(n in 1usize..=3, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random_scene(&mut rng);
            for _ in 0..8 {
                if s.objects().len() == n { break; }
                s = random_scene(&mut rng);
            }
            prop_assert_eq!(parse_caption(&caption(&s)).unwrap(), s);
        }
    }
}
