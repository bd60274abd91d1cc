//! Deterministic synthetic dataset: procedurally drawn shape scenes paired
//! with long, verbose captions. Captions repeat their scene description until
//! they run well past one encoder window, so every sample exercises the
//! multi-window path, and each caption's attribute words uniquely identify
//! its image among the generated set.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::textpipe::{tokenize, window_count, Vocabulary};

use super::{image_io, DatasetManifest, ManifestRecord};

const BACKGROUNDS: &[(&str, [u8; 3])] = &[
    ("black", [12, 12, 12]),
    ("slate", [70, 80, 90]),
    ("navy", [20, 30, 90]),
    ("olive", [95, 105, 40]),
    ("maroon", [110, 25, 35]),
    ("teal", [25, 110, 110]),
    ("brown", [115, 75, 35]),
    ("violet", [95, 45, 130]),
    ("charcoal", [45, 48, 52]),
    ("forest", [30, 85, 45]),
    ("plum", [130, 60, 100]),
    ("steel", [95, 110, 130]),
];

const COLORS: &[(&str, [u8; 3])] = &[
    ("red", [220, 40, 40]),
    ("green", [40, 185, 70]),
    ("blue", [50, 90, 230]),
    ("yellow", [235, 220, 50]),
    ("magenta", [200, 60, 205]),
    ("cyan", [60, 200, 215]),
    ("orange", [240, 150, 40]),
    ("white", [245, 245, 245]),
    ("pink", [245, 150, 180]),
    ("lime", [160, 230, 60]),
    ("gold", [212, 175, 55]),
    ("coral", [250, 115, 95]),
    ("mint", [150, 235, 190]),
    ("indigo", [75, 60, 180]),
    ("salmon", [250, 130, 115]),
    ("silver", [190, 195, 200]),
    ("crimson", [175, 20, 50]),
    ("amber", [255, 190, 0]),
    ("emerald", [80, 200, 120]),
    ("turquoise", [65, 225, 210]),
    ("lavender", [180, 160, 250]),
    ("peach", [255, 200, 150]),
    ("ruby", [225, 15, 90]),
    ("ivory", [250, 250, 230]),
    ("azure", [0, 128, 255]),
    ("scarlet", [255, 36, 0]),
    ("jade", [0, 168, 107]),
    ("bronze", [205, 127, 50]),
    ("copper", [184, 115, 51]),
    ("rose", [255, 100, 130]),
    ("sand", [226, 202, 118]),
    ("aqua", [0, 255, 255]),
];

const SHAPES: &[&str] = &["circle", "square", "triangle", "diamond", "cross"];
const SIZES: &[&str] = &["tiny", "small", "medium", "large", "huge"];
const STYLES: &[&str] = &["solid", "hollow", "striped", "dotted"];
const ROWS: &[&str] = &["top", "upper", "middle", "lower", "bottom"];
const COLS: &[&str] = &["left", "center", "right"];
const COUNT_WORDS: &[&str] = &["one", "two", "three"];

/// Generic connective words shipped in the vocabulary for free-form text;
/// the caption templates themselves avoid them, because a word present in
/// every caption would hand all captions a large shared component. Disjoint
/// from the attribute words above so attribute-keyword matching stays exact.
const FILLER: &[&str] = &[
    "the", "panel", "shows", "a", "background", "appears", "in", "region", "is", "drawn", "and",
    "toward", "area", "contains", "shapes", "over", "sits", "at", "zone", "filling", "placed",
    "near", "spot", "on", "field", "with", "single", "total",
];

/// Every word the generator can emit, in vocabulary-file order.
pub fn vocabulary_lines() -> Vec<&'static str> {
    let mut lines: Vec<&'static str> = Vec::new();
    lines.extend(BACKGROUNDS.iter().map(|(n, _)| *n));
    lines.extend(COLORS.iter().map(|(n, _)| *n));
    lines.extend(SHAPES);
    lines.extend(SIZES);
    lines.extend(STYLES);
    lines.extend(ROWS);
    lines.extend(COLS);
    lines.extend(COUNT_WORDS);
    lines.extend(FILLER);
    lines
}

/// Attribute words that identify scenes (everything except filler).
pub fn attribute_universe() -> BTreeSet<&'static str> {
    let mut set = BTreeSet::new();
    set.extend(BACKGROUNDS.iter().map(|(n, _)| *n));
    set.extend(COLORS.iter().map(|(n, _)| *n));
    set.extend(SHAPES.iter().copied());
    set.extend(SIZES.iter().copied());
    set.extend(STYLES.iter().copied());
    set.extend(ROWS.iter().copied());
    set.extend(COLS.iter().copied());
    set
}

#[derive(Debug, Clone)]
struct ShapeSpec {
    color: usize,
    shape: usize,
    size: usize,
    style: usize,
    row: usize,
    col: usize,
    /// Small per-shape tint so equal color words still draw distinct pixels.
    jitter: [i32; 3],
}

#[derive(Debug, Clone)]
struct Scene {
    background: usize,
    /// Per-sample background tint, same idea as the shape jitter.
    bg_jitter: [i32; 3],
    shapes: Vec<ShapeSpec>,
}

impl Scene {
    fn keywords(&self) -> BTreeSet<String> {
        let mut words = BTreeSet::new();
        words.insert(BACKGROUNDS[self.background].0.to_string());
        for s in &self.shapes {
            words.insert(COLORS[s.color].0.to_string());
            words.insert(SHAPES[s.shape].to_string());
            words.insert(SIZES[s.size].to_string());
            words.insert(STYLES[s.style].to_string());
            words.insert(ROWS[s.row].to_string());
            words.insert(COLS[s.col].to_string());
        }
        words
    }

    /// Size of the symmetric difference of attribute-keyword sets.
    fn keyword_distance(&self, other: &BTreeSet<String>) -> usize {
        let own = self.keywords();
        own.symmetric_difference(other).count()
    }
}

fn jitter(rng: &mut Rng, spread: u64) -> [i32; 3] {
    let mut j = [0i32; 3];
    for v in j.iter_mut() {
        *v = rng.next_below(2 * spread + 1) as i32 - spread as i32;
    }
    j
}

fn draw_scene(rng: &mut Rng) -> Scene {
    let background = rng.next_below(BACKGROUNDS.len() as u64) as usize;
    let bg_jitter = jitter(rng, 15);
    // mostly one shape, sometimes two: few distinct attribute words per
    // caption, repeated often, give each sample a concentrated signature
    let count = 1 + (rng.next_below(4) == 3) as usize;
    let shapes = (0..count)
        .map(|_| ShapeSpec {
            color: rng.next_below(COLORS.len() as u64) as usize,
            shape: rng.next_below(SHAPES.len() as u64) as usize,
            size: rng.next_below(SIZES.len() as u64) as usize,
            style: rng.next_below(STYLES.len() as u64) as usize,
            row: rng.next_below(ROWS.len() as u64) as usize,
            col: rng.next_below(COLS.len() as u64) as usize,
            jitter: jitter(rng, 10),
        })
        .collect();
    Scene { background, bg_jitter, shapes }
}

/// One phrase about a single shape: a permutation of its six attribute
/// words, in the keyword style of terse figure captions. Connective words
/// are deliberately absent: a word present in every caption would give all
/// captions a large shared component, which at desk scale swamps the
/// per-sample signal the matcher has to learn from.
fn shape_sentence(s: &ShapeSpec, variant: u64) -> Vec<&'static str> {
    let (color, shape, size) = (COLORS[s.color].0, SHAPES[s.shape], SIZES[s.size]);
    let (style, row, col) = (STYLES[s.style], ROWS[s.row], COLS[s.col]);
    match variant % 4 {
        0 => vec![size, style, color, shape, row, col],
        1 => vec![row, col, size, style, color, shape],
        2 => vec![size, color, shape, style, row, col],
        _ => vec![color, shape, size, style, row, col],
    }
}

fn background_sentence(scene: &Scene) -> Vec<&'static str> {
    vec![BACKGROUNDS[scene.background].0]
}

/// Builds the caption as a stream of attribute phrases in an order drawn per
/// sample, until it reaches `target` words (125..=155). Every caption needs
/// at least two windows, and each pass mentions the background and every
/// shape, so each window carries the full attribute signature.
fn build_caption(scene: &Scene, rng: &mut Rng) -> String {
    let target = 125 + rng.next_below(31) as usize;
    let base = rng.next_u64();
    let mut words: Vec<&'static str> = Vec::new();
    let mut pass: u64 = 0;
    while words.len() < target {
        words.extend(background_sentence(scene));
        // shapes in a per-pass rotation so no single ordering dominates
        let offset = (base.wrapping_add(pass) as usize) % scene.shapes.len();
        for k in 0..scene.shapes.len() {
            let s = &scene.shapes[(k + offset) % scene.shapes.len()];
            words.extend(shape_sentence(s, base.wrapping_add(pass).wrapping_add(k as u64)));
        }
        pass += 1;
    }
    words.join(" ")
}

fn tint(base: [u8; 3], jitter: [i32; 3]) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (base[c] as i32 + jitter[c]).clamp(0, 255) as u8;
    }
    out
}

fn rasterize(scene: &Scene, image_size: usize) -> Vec<u8> {
    let mut rgb = vec![0u8; image_size * image_size * 3];
    let bg = tint(BACKGROUNDS[scene.background].1, scene.bg_jitter);
    for px in rgb.chunks_exact_mut(3) {
        px.copy_from_slice(&bg);
    }
    // size fractions of the image side, as integer hundredths
    const RADIUS_PCT: [usize; 5] = [11, 16, 22, 28, 34];
    for s in &scene.shapes {
        let color = tint(COLORS[s.color].1, s.jitter);
        let cx = ((2 * s.col + 1) * image_size / 6) as i64;
        let cy = ((2 * s.row + 1) * image_size / 6) as i64;
        let r = (image_size * RADIUS_PCT[s.size] / 100) as i64;
        let rim = (r / 3).max(2);
        for y in 0..image_size as i64 {
            for x in 0..image_size as i64 {
                let inside = |radius: i64| match SHAPES[s.shape] {
                    "circle" => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius,
                    "square" => (x - cx).abs() <= radius && (y - cy).abs() <= radius,
                    "triangle" => {
                        // upward triangle: apex (cx, cy-radius), base y = cy+radius
                        let dy = y - (cy - radius);
                        dy >= 0 && dy <= 2 * radius && (x - cx).abs() <= dy / 2
                    }
                    "diamond" => (x - cx).abs() + (y - cy).abs() <= radius,
                    "cross" => {
                        let arm = (radius / 3).max(1);
                        ((x - cx).abs() <= arm || (y - cy).abs() <= arm)
                            && (x - cx).abs() <= radius
                            && (y - cy).abs() <= radius
                    }
                    _ => unreachable!(),
                };
                let filled = inside(r)
                    && match STYLES[s.style] {
                        "solid" => true,
                        "hollow" => !inside(r - rim),
                        "striped" => (x + y).rem_euclid(4) < 2,
                        "dotted" => x.rem_euclid(4) < 2 && y.rem_euclid(4) < 2,
                        _ => unreachable!(),
                    };
                if filled {
                    let at = ((y as usize) * image_size + x as usize) * 3;
                    rgb[at..at + 3].copy_from_slice(&color);
                }
            }
        }
    }
    rgb
}

/// Generates `count` image/caption pairs under `out_dir` (images/ plus
/// manifest.jsonl) and returns the manifest together with each sample's
/// attribute keyword set. Scenes are rejection-sampled until their keyword
/// sets are pairwise distinct, which is what makes captions discriminative.
pub fn generate_synthetic(
    count: usize,
    vocab: &Vocabulary,
    seed: u64,
    image_size: usize,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<BTreeSet<String>>)> {
    if count < 2 {
        return Err(Error::DatasetTooSmall(format!("need at least 2 samples, got {count}")));
    }
    if image_size < 6 {
        return Err(Error::config("image_size", "synthetic images need at least 6 pixels per side"));
    }
    for word in vocabulary_lines() {
        if vocab.id(word).is_none() {
            return Err(Error::config(
                "vocab",
                format!("vocabulary is missing generator word {word:?}"),
            ));
        }
    }

    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?;

    let mut rng = Rng::new(seed);
    let mut records = Vec::with_capacity(count);
    let mut keyword_sets: Vec<BTreeSet<String>> = Vec::with_capacity(count);
    let mut manifest_lines = String::new();
    for i in 0..count {
        // rejection-sample scenes until well separated from all previous
        // ones, easing the requirement if the draw budget runs out
        let mut min_distance = 5usize;
        let scene = loop {
            let mut found = None;
            for _ in 0..2000 {
                let candidate = draw_scene(&mut rng);
                if keyword_sets.iter().all(|k| candidate.keyword_distance(k) >= min_distance) {
                    found = Some(candidate);
                    break;
                }
            }
            match found {
                Some(scene) => break scene,
                None if min_distance > 1 => min_distance -= 1,
                None => {
                    return Err(Error::DatasetTooSmall(format!(
                        "cannot draw {count} distinct scenes"
                    )))
                }
            }
        };
        let caption = build_caption(&scene, &mut rng);
        let tokens = tokenize(&caption, vocab);
        debug_assert!(tokens.len() >= 120 && tokens.len() <= 300);
        debug_assert!(window_count(tokens.len(), 75, 37).unwrap() >= 2);
        debug_assert_eq!(tokens.dropped_chars, 0);

        let id = format!("synth-{i:04}");
        let image_path = format!("images/{id}.ppm");
        let rgb = rasterize(&scene, image_size);
        image_io::write_ppm(&out_dir.join(&image_path), image_size, image_size, &rgb)?;

        let record = ManifestRecord { id, image_path, caption };
        manifest_lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
        manifest_lines.push('\n');
        records.push(record);
        keyword_sets.push(scene.keywords());
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    std::fs::write(&manifest_path, manifest_lines)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    Ok((DatasetManifest { records, root: out_dir.to_path_buf() }, keyword_sets))
}

/// Writes the generator's vocabulary file (one token per line).
pub fn write_vocabulary(path: &Path) -> Result<()> {
    let mut text = vocabulary_lines().join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
