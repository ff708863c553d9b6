//! Synthetic shape/color scenes with captions, used as the desk-scale corpus
//! for pretraining and every downstream task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mdm::RasterImage;
use crate::seed::combine;

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [40, 70, 230]),
    ("yellow", [235, 220, 50]),
    ("cyan", [40, 210, 220]),
    ("magenta", [210, 50, 200]),
    ("white", [245, 245, 245]),
    ("orange", [240, 140, 30]),
];
pub const SHAPES: [&str; 4] = ["square", "dot", "hbar", "vbar"];
pub const QUADRANTS: [(&str, &str); 4] = [("top", "left"), ("top", "right"), ("bottom", "left"), ("bottom", "right")];
const BACKGROUND: [u8; 3] = [20, 20, 20];
const NOISE: i32 = 12;

/// One object of `color` and `shape` in `quadrant` on a dark background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scene {
    pub color: usize,
    pub shape: usize,
    pub quadrant: usize,
}

impl Scene {
    pub fn caption(&self) -> String {
        let (v, h) = QUADRANTS[self.quadrant];
        format!("a {} {} at the {v} {h}", COLORS[self.color].0, SHAPES[self.shape])
    }

    fn random(rng: &mut ChaCha8Rng, colors: usize) -> Self {
        Self {
            color: rng.gen_range(0..colors),
            shape: rng.gen_range(0..SHAPES.len()),
            quadrant: rng.gen_range(0..QUADRANTS.len()),
        }
    }
}

fn noisy(rgb: [u8; 3], rng: &mut ChaCha8Rng) -> [u8; 3] {
    rgb.map(|c| (c as i32 + rng.gen_range(-NOISE..=NOISE)).clamp(0, 255) as u8)
}

fn fill(size: usize, background: [u8; 3], rng: &mut ChaCha8Rng) -> RasterImage {
    let mut img = RasterImage::new(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            img.set(x, y, &noisy(background, rng));
        }
    }
    img
}

fn in_shape(shape: usize, x: usize, y: usize, q: usize) -> bool {
    let inside = |v: usize| v < q;
    let mid = |v: usize| v >= q / 3 && v < q - q / 3;
    match shape {
        0 => inside(x) && inside(y),
        1 => mid(x) && mid(y),
        2 => inside(x) && mid(y),
        _ => inside(y) && mid(x),
    }
}

/// Renders `scene` at `size`×`size` with per-pixel noise drawn from `seed`.
pub fn render_scene(scene: &Scene, size: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = fill(size, BACKGROUND, &mut rng);
    let q = size / 2;
    let (oy, ox) = ((scene.quadrant / 2) * q, (scene.quadrant % 2) * q);
    for y in 0..q {
        for x in 0..q {
            if in_shape(scene.shape, x, y, q) {
                img.set(ox + x, oy + y, &noisy(COLORS[scene.color].1, &mut rng));
            }
        }
    }
    img
}

/// Unlabeled text, images and captioned pairs for masked data modeling.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub texts: Vec<String>,
    pub images: Vec<RasterImage>,
    pub pairs: Vec<(RasterImage, String)>,
}

impl SynthCorpus {
    /// Every line of text in the corpus, for building a vocabulary.
    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.texts.iter().chain(self.pairs.iter().map(|(_, c)| c)).map(String::as_str)
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let s = Scene::random(rng, COLORS.len());
    let (v, h) = QUADRANTS[s.quadrant];
    let (color, shape) = (COLORS[s.color].0, SHAPES[s.shape]);
    match rng.gen_range(0..3) {
        0 => s.caption(),
        1 => format!("the {shape} at the {v} {h} is {color}"),
        _ => format!("there is a {color} {shape} on the {h} side"),
    }
}

pub fn pretrain_corpus(texts: usize, images: usize, pairs: usize, size: usize, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(combine(&[seed, 1]));
    let texts = (0..texts).map(|_| sentence(&mut rng)).collect();
    let images = (0..images)
        .map(|i| render_scene(&Scene::random(&mut rng, COLORS.len()), size, combine(&[seed, 2, i as u64])))
        .collect();
    let pairs = (0..pairs)
        .map(|i| {
            let s = Scene::random(&mut rng, COLORS.len());
            (render_scene(&s, size, combine(&[seed, 3, i as u64])), s.caption())
        })
        .collect();
    SynthCorpus { texts, images, pairs }
}

/// The 64 distinct scenes of every color with a square or a dot, in a fixed
/// order.
pub fn retrieval_scenes() -> Vec<Scene> {
    let mut out = Vec::with_capacity(64);
    for color in 0..COLORS.len() {
        for shape in 0..2 {
            for quadrant in 0..QUADRANTS.len() {
                out.push(Scene { color, shape, quadrant });
            }
        }
    }
    out
}

/// `copies` noisy renders of each retrieval scene, grouped by copy.
pub fn retrieval_pairs(copies: usize, size: usize, seed: u64) -> Vec<(RasterImage, String)> {
    let scenes = retrieval_scenes();
    (0..copies)
        .flat_map(|c| {
            scenes
                .iter()
                .enumerate()
                .map(move |(i, s)| (render_scene(s, size, combine(&[seed, 4, c as u64, i as u64])), s.caption()))
        })
        .collect()
}

/// Class names of the classification task: the first four colors crossed
/// with squares and dots.
pub fn class_names() -> Vec<String> {
    (0..8)
        .map(|k| format!("{} {}", COLORS[k / 2].0, SHAPES[k % 2]))
        .collect()
}

/// Images labeled with an index into [`class_names`]; quadrant and noise vary.
pub fn classification_set(n: usize, size: usize, seed: u64) -> Vec<(RasterImage, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(combine(&[seed, 5]));
    (0..n)
        .map(|i| {
            let label = i % 8;
            let scene = Scene {
                color: label / 2,
                shape: label % 2,
                quadrant: rng.gen_range(0..QUADRANTS.len()),
            };
            (render_scene(&scene, size, combine(&[seed, 6, i as u64])), label)
        })
        .collect()
}

pub const VQA_QUESTION: &str = "what color is the background";

/// Answer vocabulary of the question-answering task.
pub fn vqa_answers() -> Vec<String> {
    COLORS.iter().map(|(c, _)| c.to_string()).collect()
}

/// A colored background with a small object of another color; the answer is
/// the background color.
pub fn vqa_set(n: usize, size: usize, seed: u64) -> Vec<(RasterImage, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(combine(&[seed, 7]));
    (0..n)
        .map(|i| {
            let answer = i % COLORS.len();
            let mut obj = Scene::random(&mut rng, COLORS.len());
            if obj.color == answer {
                obj.color = (obj.color + 1) % COLORS.len();
            }
            let mut img_rng = ChaCha8Rng::seed_from_u64(combine(&[seed, 8, i as u64]));
            let mut img = fill(size, COLORS[answer].1, &mut img_rng);
            let q = size / 2;
            let (oy, ox) = ((obj.quadrant / 2) * q, (obj.quadrant % 2) * q);
            for y in 0..q {
                for x in 0..q {
                    if in_shape(obj.shape, x, y, q) {
                        img.set(ox + x, oy + y, &noisy(COLORS[obj.color].1, &mut img_rng));
                    }
                }
            }
            (img, answer)
        })
        .collect()
}

/// One example of the two-image task: label 1 when the statement in `text`
/// ("same" or "different") is true of the two images.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPairExample {
    pub image_a: RasterImage,
    pub image_b: RasterImage,
    pub text: String,
    pub label: usize,
}

pub fn two_pair_set(n: usize, size: usize, seed: u64) -> Vec<TwoPairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(combine(&[seed, 9]));
    (0..n)
        .map(|i| {
            let a = rng.gen_range(0..4);
            let equal = i % 2 == 0;
            let b = if equal { a } else { (a + rng.gen_range(1..4)) % 4 };
            let says_same = (i / 2) % 2 == 0;
            let solid = |c: usize, k: u64| {
                let mut r = ChaCha8Rng::seed_from_u64(combine(&[seed, 10, i as u64, k]));
                fill(size, COLORS[c].1, &mut r)
            };
            TwoPairExample {
                image_a: solid(a, 0),
                image_b: solid(b, 1),
                text: if says_same { "same" } else { "different" }.to_string(),
                label: usize::from(says_same == equal),
            }
        })
        .collect()
}

/// Three vertical color bands; the caption names them left to right.
pub fn copy_set(n: usize, size: usize, seed: u64) -> Vec<(RasterImage, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(combine(&[seed, 11]));
    (0..n)
        .map(|i| {
            let bands: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let mut img_rng = ChaCha8Rng::seed_from_u64(combine(&[seed, 12, i as u64]));
            let mut img = RasterImage::new(size, size, 3);
            let width = size.div_ceil(3);
            for y in 0..size {
                for x in 0..size {
                    img.set(x, y, &noisy(COLORS[bands[(x / width).min(2)]].1, &mut img_rng));
                }
            }
            let caption = bands.iter().map(|&b| COLORS[b].0).collect::<Vec<_>>().join(" ");
            (img, caption)
        })
        .collect()
}
