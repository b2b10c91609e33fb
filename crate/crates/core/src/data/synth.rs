//! Synthetic image/caption corpus.
//!
//! Every image is a dark uniform background with one colored shape filling a
//! 2×2-patch block in one quadrant. The caption (`"red square top left"`) is
//! recovered from the pixels alone by [`describe_pixels`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, COLORS, SHAPES};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Patch layout of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            grid_rows: 4,
            grid_cols: 4,
            patch_size: 8,
            channels: 3,
        }
    }
}

impl ImageSpec {
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn height(&self) -> usize {
        self.grid_rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid_cols * self.patch_size
    }

    pub fn num_values(&self) -> usize {
        self.height() * self.width() * self.channels
    }

    /// Splits an HWC pixel buffer into row-major patches, each flattened to
    /// `patch_dim` values scaled into `[0, 1]`.
    pub fn patches(&self, pixels: &[u8]) -> Result<Vec<Vec<Scalar>>> {
        if pixels.len() != self.num_values() {
            return Err(Error::Shape {
                op: "patches",
                lhs: vec![self.height(), self.width(), self.channels],
                rhs: vec![pixels.len()],
            });
        }
        let w = self.width();
        let ps = self.patch_size;
        let mut out = Vec::with_capacity(self.num_patches());
        for gr in 0..self.grid_rows {
            for gc in 0..self.grid_cols {
                let mut patch = Vec::with_capacity(self.patch_dim());
                for y in 0..ps {
                    let row = gr * ps + y;
                    let start = (row * w + gc * ps) * self.channels;
                    patch.extend(
                        pixels[start..start + ps * self.channels]
                            .iter()
                            .map(|&p| p as Scalar / 255.0),
                    );
                }
                out.push(patch);
            }
        }
        Ok(out)
    }
}

const BASE_RGB: [[i32; 3]; 4] = [[220, 40, 40], [40, 200, 60], [40, 70, 220], [225, 210, 40]];
const COLOR_JITTER: i32 = 25;
const BACKGROUND_MAX: u8 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn words(self) -> [&'static str; 2] {
        match self {
            Quadrant::TopLeft => ["top", "left"],
            Quadrant::TopRight => ["top", "right"],
            Quadrant::BottomLeft => ["bottom", "left"],
            Quadrant::BottomRight => ["bottom", "right"],
        }
    }

    fn origin(self, spec: &ImageSpec) -> (usize, usize) {
        let (h2, w2) = (spec.height() / 2, spec.width() / 2);
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (0, w2),
            Quadrant::BottomLeft => (h2, 0),
            Quadrant::BottomRight => (h2, w2),
        }
    }
}

/// What an image shows: color index into [`COLORS`], shape index into [`SHAPES`], quadrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scene {
    pub color: usize,
    pub shape: usize,
    pub quadrant: Quadrant,
}

impl Scene {
    pub const COUNT: usize = 64;

    pub fn from_index(i: usize) -> Scene {
        let i = i % Self::COUNT;
        Scene {
            color: i / 16,
            shape: (i / 4) % 4,
            quadrant: Quadrant::ALL[i % 4],
        }
    }

    pub fn caption(&self) -> String {
        let [v, h] = self.quadrant.words();
        format!("{} {} {v} {h}", COLORS[self.color], SHAPES[self.shape])
    }
}

/// Whether pixel `(y, x)` of a `size×size` block belongs to the shape.
fn shape_mask(shape: usize, size: usize, y: usize, x: usize) -> bool {
    let c = (size as f64 - 1.0) / 2.0;
    let (fy, fx) = (y as f64 - c, x as f64 - c);
    match shape {
        0 => true,
        1 => fx * fx + fy * fy <= (size as f64 / 2.0).powi(2),
        2 => y >= x,
        3 => fx.abs() < size as f64 / 5.0 || fy.abs() < size as f64 / 5.0,
        _ => unreachable!("unknown shape index {shape}"),
    }
}

/// Renders a scene; returns HWC pixels.
pub fn render(spec: &ImageSpec, scene: &Scene, rng: &mut impl Rng) -> Vec<u8> {
    let bg = rng.gen_range(0..=BACKGROUND_MAX);
    let rgb: Vec<u8> = BASE_RGB[scene.color]
        .iter()
        .map(|&c| (c + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0, 255) as u8)
        .collect();
    let mut pixels = vec![bg; spec.num_values()];
    let size = spec.height() / 2;
    let (oy, ox) = scene.quadrant.origin(spec);
    for y in 0..size {
        for x in 0..size {
            if shape_mask(scene.shape, size, y, x) {
                let at = ((oy + y) * spec.width() + ox + x) * spec.channels;
                pixels[at..at + spec.channels].copy_from_slice(&rgb[..spec.channels]);
            }
        }
    }
    pixels
}

/// Recovers the scene from pixels.
pub fn describe_pixels(spec: &ImageSpec, pixels: &[u8]) -> Result<Scene> {
    let ch = spec.channels;
    let degenerate = |m: &str| Error::Degenerate(format!("describe_pixels: {m}"));
    if pixels.len() != spec.num_values() || ch != 3 {
        return Err(degenerate("unexpected image layout"));
    }
    // background is gray (r == g == b) and no brighter than BACKGROUND_MAX
    let is_bg = |p: &[u8]| p[0] == p[1] && p[1] == p[2] && p[0] <= BACKGROUND_MAX;
    let mut fg = Vec::new();
    for (i, p) in pixels.chunks(ch).enumerate() {
        if !is_bg(p) {
            fg.push((i / spec.width(), i % spec.width(), p));
        }
    }
    let &(y0, x0, rgb) = fg.first().ok_or_else(|| degenerate("no foreground"))?;
    let color = BASE_RGB
        .iter()
        .enumerate()
        .min_by_key(|(_, base)| base.iter().zip(rgb).map(|(&b, &p)| (b - p as i32).pow(2)).sum::<i32>())
        .map(|(i, _)| i)
        .unwrap();
    let (h2, w2) = (spec.height() / 2, spec.width() / 2);
    let quadrant = match (y0 >= h2, x0 >= w2) {
        (false, false) => Quadrant::TopLeft,
        (false, true) => Quadrant::TopRight,
        (true, false) => Quadrant::BottomLeft,
        (true, true) => Quadrant::BottomRight,
    };
    let (oy, ox) = quadrant.origin(spec);
    let mut mask = vec![false; h2 * w2];
    for &(y, x, _) in &fg {
        if y < oy || x < ox || y >= oy + h2 || x >= ox + w2 {
            return Err(degenerate("foreground spans quadrants"));
        }
        mask[(y - oy) * w2 + (x - ox)] = true;
    }
    let shape = (0..SHAPES.len())
        .find(|&s| (0..h2 * w2).all(|i| mask[i] == shape_mask(s, h2, i / w2, i % w2)))
        .ok_or_else(|| degenerate("foreground matches no shape"))?;
    Ok(Scene { color, shape, quadrant })
}

/// Which prompt/response pairing a corpus uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMix {
    /// Empty instruction, full caption response.
    Caption,
    /// Mixture of describe/color/shape/position questions.
    Instruction,
    /// Always "describe the image"; used for held-out caption evaluation.
    Describe,
}

pub const DESCRIBE: &str = "describe the image";
const QUESTIONS: [&str; 4] = [
    DESCRIBE,
    "what color is the shape",
    "what shape is it",
    "where is the shape",
];

fn response_text(scene: &Scene, question: usize) -> String {
    let [v, h] = scene.quadrant.words();
    match question {
        0 => scene.caption(),
        1 => COLORS[scene.color].to_string(),
        2 => SHAPES[scene.shape].to_string(),
        _ => format!("{v} {h}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub pixels: Vec<u8>,
    pub instruction: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// Expected `(instruction, response)` ids for an image under a task mix,
/// derived from the pixels. `question` picks the prompt for [`TaskMix::Instruction`].
pub fn text_for(
    spec: &ImageSpec,
    vocab: &Vocabulary,
    pixels: &[u8],
    mix: TaskMix,
    question: usize,
) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let scene = describe_pixels(spec, pixels)?;
    let q = match mix {
        TaskMix::Caption => return Ok((Vec::new(), vocab.encode(&scene.caption())?)),
        TaskMix::Describe => 0,
        TaskMix::Instruction => question % QUESTIONS.len(),
    };
    Ok((vocab.encode(QUESTIONS[q])?, vocab.encode(&response_text(&scene, q))?))
}

/// Index of the prompt in an instruction, if it is one of the built-in questions.
pub fn question_index(vocab: &Vocabulary, instruction: &[TokenId]) -> Option<usize> {
    QUESTIONS
        .iter()
        .position(|q| vocab.encode(q).map(|ids| ids == instruction).unwrap_or(false))
}

/// Generates `n` samples. Image content depends only on `(seed, index)`, so
/// the same seed yields the same images for every task mix. Scenes cycle
/// through all color×shape×quadrant combinations in a seeded order.
pub fn generate_samples(
    seed: u64,
    n: usize,
    spec: &ImageSpec,
    vocab: &Vocabulary,
    mix: TaskMix,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::contract("n_samples must be at least 1"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes: Vec<usize> = (0..n).map(|i| i % Scene::COUNT).collect();
    scenes.shuffle(&mut order_rng);

    let mut image_rng = ChaCha8Rng::seed_from_u64(seed);
    image_rng.set_stream(1);
    let mut question_rng = ChaCha8Rng::seed_from_u64(seed);
    question_rng.set_stream(2);

    scenes
        .into_iter()
        .map(|s| {
            let pixels = render(spec, &Scene::from_index(s), &mut image_rng);
            let question = question_rng.gen_range(0..QUESTIONS.len());
            let (instruction, response) = text_for(spec, vocab, &pixels, mix, question)?;
            Ok(SyntheticSample {
                pixels,
                instruction,
                response,
            })
        })
        .collect()
}
