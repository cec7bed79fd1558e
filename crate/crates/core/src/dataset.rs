//! Procedural scenes: one coloured shape on a plain or striped background,
//! captioned by a closed grammar and paired with its exact pixel mask.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io;
use crate::mask::{Mask, Rle};
use crate::rng::{Domain, Rng, StreamId};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
/// Maximum offset of the shape centre from the canvas centre, per axis.
pub const JITTER: i64 = 6;

pub const MANIFEST: &str = "manifest.jsonl";

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

word_enum!(Shape { Square => "square", Circle => "circle", Triangle => "triangle" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
word_enum!(Size { Big => "big", Small => "small" });
word_enum!(Background { White => "white", Black => "black", Gray => "gray" });
word_enum!(Style { Plain => "plain", Striped => "striped" });

impl Shape {
    /// Brightness factor of the fill. Makes the shape word bear on every
    /// object pixel rather than only on the silhouette.
    pub fn shade(self) -> f64 {
        match self {
            Shape::Square => 1.0,
            Shape::Circle => 0.75,
            Shape::Triangle => 0.5,
        }
    }
}

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 70, 220],
            Color::Yellow => [230, 200, 30],
        }
    }
}

impl Background {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Background::White => [255, 255, 255],
            Background::Black => [0, 0, 0],
            Background::Gray => [128, 128, 128],
        }
    }

    /// Colour of the alternate stripes.
    pub fn stripe_rgb(self) -> [u8; 3] {
        match self {
            Background::White => [190, 190, 190],
            Background::Black => [70, 70, 70],
            Background::Gray => [190, 190, 190],
        }
    }
}

impl Size {
    /// Half extent in pixels.
    pub fn radius(self) -> i64 {
        match self {
            Size::Big => 8,
            Size::Small => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub background: Background,
    pub style: Style,
    /// Shape centre in pixel-corner coordinates.
    pub center: (i64, i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub scene: Scene,
    /// `[3, 32, 32]`, values in `[−1, 1]`.
    pub image: Tensor,
    pub prompt: String,
    pub mask: Mask,
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

impl Scene {
    pub fn random(seed: u64) -> Scene {
        let mut rng = Rng::new(seed, StreamId::new(Domain::Scene, 0));
        let shape = pick(&mut rng, Shape::ALL);
        let color = pick(&mut rng, Color::ALL);
        let size = pick(&mut rng, Size::ALL);
        let background = pick(&mut rng, Background::ALL);
        let style = pick(&mut rng, Style::ALL);
        let mid = IMAGE_SIZE as i64 / 2;
        let cx = mid + rng.range_inclusive(-JITTER, JITTER);
        let cy = mid + rng.range_inclusive(-JITTER, JITTER);
        Scene {
            shape,
            color,
            size,
            background,
            style,
            center: (cx, cy),
        }
    }

    /// `a <size> <color> <shape> on a <background> background[, striped]`.
    pub fn prompt(&self) -> String {
        let mut p = format!(
            "a {} {} {} on a {} background",
            self.size.word(),
            self.color.word(),
            self.shape.word(),
            self.background.word()
        );
        if self.style == Style::Striped {
            p.push_str(", striped");
        }
        p
    }

    /// Recovers every captioned attribute; the centre is not part of the
    /// caption and is returned as the canvas centre.
    pub fn parse(prompt: &str) -> Option<Scene> {
        let lexed = prompt.replace(',', " , ");
        let w: Vec<&str> = lexed.split_whitespace().collect();
        let style = match w.len() {
            8 => Style::Plain,
            10 if w[8] == "," && w[9] == "striped" => Style::Striped,
            _ => return None,
        };
        if w[0] != "a" || w[4] != "on" || w[5] != "a" || w[7] != "background" {
            return None;
        }
        let mid = IMAGE_SIZE as i64 / 2;
        Some(Scene {
            size: Size::from_word(w[1])?,
            color: Color::from_word(w[2])?,
            shape: Shape::from_word(w[3])?,
            background: Background::from_word(w[6])?,
            style,
            center: (mid, mid),
        })
    }

    /// Token position of the shape noun in [`Scene::prompt`].
    pub const SHAPE_TOKEN: usize = 3;
    pub const COLOR_TOKEN: usize = 2;
    pub const ARTICLE_TOKEN: usize = 0;
    /// Position of `striped` in a striped prompt.
    pub const STYLE_TOKEN: usize = 9;

    /// Whether pixel `(x, y)` is covered, sampling at the pixel centre.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let r = self.size.radius() as f64;
        let (cx, cy) = (self.center.0 as f64, self.center.1 as f64);
        let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        match self.shape {
            Shape::Square => px.abs() < r && py.abs() < r,
            Shape::Circle => px * px + py * py <= r * r,
            Shape::Triangle => py >= -r && py <= r && px.abs() <= (py + r) / 2.0,
        }
    }

    /// Object colour: the named colour at the shape's shade.
    pub fn fill(&self) -> [u8; 3] {
        let k = self.shape.shade();
        self.color.rgb().map(|v| (v as f64 * k).round() as u8)
    }

    pub fn mask(&self) -> Mask {
        Mask::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y| self.covers(x, y))
    }

    pub fn render(&self) -> (Tensor, Mask) {
        let n = IMAGE_SIZE;
        let mask = self.mask();
        let mut data = vec![0.0f32; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                let rgb = if mask.get(x, y) {
                    self.fill()
                } else if self.style == Style::Striped && (y / 2) % 2 == 1 {
                    self.background.stripe_rgb()
                } else {
                    self.background.rgb()
                };
                for (c, &v) in rgb.iter().enumerate() {
                    data[c * n * n + y * n + x] = image_io::byte_to_unit(v);
                }
            }
        }
        (Tensor::from_vec(vec![3, n, n], data).expect("canvas"), mask)
    }
}

pub fn gen_scene(seed: u64) -> Sample {
    let scene = Scene::random(seed);
    let (image, mask) = scene.render();
    Sample {
        seed,
        scene,
        image,
        prompt: scene.prompt(),
        mask,
    }
}

/// Seeds of a contiguous split. Evaluation splits should start far from
/// training ones.
pub fn split_seeds(base: u64, n: usize) -> impl Iterator<Item = u64> {
    (0..n as u64).map(move |i| base.wrapping_add(i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub prompt: String,
    pub seed: u64,
    pub mask: Rle,
}

pub fn write_manifest(dir: &Path, n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = crate::parallel::map_indexed(n, |i| gen_scene(seed.wrapping_add(i as u64)));
    let mut lines = String::new();
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:06}.png");
        image_io::save_png(&dir.join(&file), &s.image)?;
        let rec = ManifestRecord {
            file,
            prompt: s.prompt.clone(),
            seed: s.seed,
            mask: s.mask.encode(),
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
    }
    image_io::write_atomic(&dir.join(MANIFEST), lines.as_bytes())
}

pub struct ManifestReader<'a> {
    dir: &'a Path,
    path: std::path::PathBuf,
    lines: std::iter::Enumerate<std::io::Lines<BufReader<fs::File>>>,
}

impl Iterator for ManifestReader<'_> {
    type Item = Result<(ManifestRecord, Tensor, Mask)>;

    fn next(&mut self) -> Option<Self::Item> {
        let (no, line) = self.lines.next()?;
        Some((|| {
            let line = line.map_err(|e| Error::io(&self.path, e))?;
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&self.path, format!("line {}: {e}", no + 1)))?;
            let image = image_io::load_png(&self.dir.join(&rec.file))?;
            let mask = Mask::decode(&rec.mask)
                .map_err(|e| Error::format(&self.path, format!("line {}: {e}", no + 1)))?;
            Ok((rec, image, mask))
        })())
    }
}

pub fn read_manifest(dir: &Path) -> Result<ManifestReader<'_>> {
    let path = dir.join(MANIFEST);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    Ok(ManifestReader {
        dir,
        path,
        lines: BufReader::new(f).lines().enumerate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(gen_scene(42), gen_scene(42));
        assert_ne!(gen_scene(42).image, gen_scene(43).image);
    }

    #[test]
    fn prompt_reparses_and_tokenizes() {
        let vocab = Vocabulary::default();
        for seed in 0..500 {
            let s = gen_scene(seed);
            let parsed = Scene::parse(&s.prompt).unwrap();
            let mut scene = s.scene;
            scene.center = parsed.center;
            assert_eq!(parsed, scene);
            let tokens = vocab.tokenize(&s.prompt).unwrap();
            assert_eq!(vocab.word(tokens.ids()[Scene::SHAPE_TOKEN]), s.scene.shape.word());
            if s.scene.style == Style::Striped {
                assert_eq!(vocab.word(tokens.ids()[Scene::STYLE_TOKEN]), "striped");
            }
        }
    }

    #[test]
    fn shape_fits_and_mask_matches_pixels() {
        for seed in 0..500 {
            let s = gen_scene(seed);
            assert!(!s.mask.is_empty());
            let r = s.scene.size.radius();
            let (cx, cy) = s.scene.center;
            assert!(cx - r >= 0 && cx + r <= IMAGE_SIZE as i64);
            assert!(cy - r >= 0 && cy + r <= IMAGE_SIZE as i64);
            let rgb = s.scene.fill();
            let n = IMAGE_SIZE;
            for y in 0..n {
                for x in 0..n {
                    let px: Vec<u8> = (0..3)
                        .map(|c| image_io::unit_to_byte(s.image.data()[c * n * n + y * n + x]))
                        .collect();
                    assert_eq!(px == rgb, s.mask.get(x, y), "seed {seed} pixel {x},{y}");
                }
            }
        }
    }

    #[test]
    fn shape_frequencies_are_uniform() {
        let n = 10_000;
        let mut counts = [0usize; 3];
        for seed in 0..n {
            counts[Scene::random(seed).shape as usize] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn big_covers_more_than_small() {
        let mut s = Scene::random(0);
        s.shape = Shape::Square;
        s.size = Size::Big;
        let big = s.mask().area();
        s.size = Size::Small;
        assert!(big > s.mask().area());
        assert_eq!(big, 256);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), 5, 100).unwrap();
        let rows: Vec<_> = read_manifest(dir.path()).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(rows.len(), 5);
        for (i, (rec, img, mask)) in rows.iter().enumerate() {
            let s = gen_scene(100 + i as u64);
            assert_eq!(rec.prompt, s.prompt);
            assert!(img.bit_eq(&s.image));
            assert_eq!(mask, &s.mask);
        }
    }

    #[test]
    fn missing_manifest_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_manifest(dir.path()).err().unwrap();
        assert!(err.to_string().contains(MANIFEST));
    }
}
