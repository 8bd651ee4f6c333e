//! Positional synthetic corpus.
//!
//! Each sample scatters 3-8 entries over distinct grid cells. Sign entries
//! hold one or two vocabulary words, the rest are random letter strings that
//! tokenize to bytes. Questions ask for the entry nearest a corner or the
//! entry nearest a named sign word (overall or in one direction), and the
//! named sign can be highlighted in its visual features. Layouts whose answer
//! is not clear-cut are redrawn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{ObjRecord, OcrRecord, SampleRecord, NUM_ANSWERS};
use crate::error::{Error, Result};
use crate::geometry::{assign_patch, circle_distance, PatchCoord, PatchGrid};
use crate::vocab::Vocab;

pub const SIGN_WORDS: &[&str] = &[
    "stop", "open", "exit", "sale", "fine", "food", "spirits", "card", "stock", "paper", "fabric", "coffee",
    "hotel", "bank", "taxi", "pizza", "metro", "music", "books", "bakery", "police", "garden", "market",
    "cinema", "museum", "river", "north", "south", "east", "west", "station", "street", "avenue", "lane",
    "road", "park",
];

pub const OBJECT_LABELS: &[&str] = &[
    "car", "bus", "bottle", "person", "door", "window", "tree", "table", "clock", "phone", "cup",
];

/// Minimum gap (in cells) between the answer and the runner-up.
const MARGIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionKind {
    Corner { bottom: bool, right: bool },
    Below,
    Above,
    LeftOf,
    RightOf,
    Closest,
}

impl QuestionKind {
    const ALL: [QuestionKind; 9] = [
        QuestionKind::Corner { bottom: false, right: false },
        QuestionKind::Corner { bottom: false, right: true },
        QuestionKind::Corner { bottom: true, right: false },
        QuestionKind::Corner { bottom: true, right: true },
        QuestionKind::Below,
        QuestionKind::Above,
        QuestionKind::LeftOf,
        QuestionKind::RightOf,
        QuestionKind::Closest,
    ];

    pub fn question(&self, anchor: &str) -> String {
        let corner = |b: bool, r: bool| {
            format!(
                "what is written in the {} {} corner",
                if b { "bottom" } else { "top" },
                if r { "right" } else { "left" }
            )
        };
        match *self {
            QuestionKind::Corner { bottom, right } => corner(bottom, right),
            QuestionKind::Below => format!("what word is below {anchor}"),
            QuestionKind::Above => format!("what word is above {anchor}"),
            QuestionKind::LeftOf => format!("what word is left of {anchor}"),
            QuestionKind::RightOf => format!("what word is right of {anchor}"),
            QuestionKind::Closest => format!("which word is closest to {anchor}"),
        }
    }

    fn needs_anchor(&self) -> bool {
        !matches!(self, QuestionKind::Corner { .. })
    }

    /// Whether `p` qualifies relative to the anchor patch `a`.
    pub fn admits(&self, a: PatchCoord, p: PatchCoord) -> bool {
        match self {
            QuestionKind::Corner { .. } | QuestionKind::Closest => true,
            QuestionKind::Below => p.row > a.row,
            QuestionKind::Above => p.row < a.row,
            QuestionKind::LeftOf => p.col < a.col,
            QuestionKind::RightOf => p.col > a.col,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub n: usize,
    pub grid: PatchGrid,
    pub feature_dim: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a placed word is a random letter string.
    pub pseudo_word_rate: f64,
    /// Draw letter strings from a fixed pool of this size (0 = fresh strings).
    pub pseudo_pool: usize,
    /// Probability that a sign entry holds two sign words.
    pub multiword_rate: f64,
    /// Offset added to every visual component of the anchor entry, as if
    /// the sign in question were highlighted. Zero leaves it unmarked.
    pub anchor_highlight: f64,
    /// Share of corner questions; the rest is split evenly over
    /// `relational_kinds`.
    pub corner_rate: f64,
    pub relational_kinds: Vec<QuestionKind>,
    pub max_objects: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 32,
            grid: PatchGrid::default(),
            feature_dim: 16,
            min_words: 3,
            max_words: 8,
            pseudo_word_rate: 0.6,
            pseudo_pool: 0,
            multiword_rate: 0.0,
            anchor_highlight: 0.0,
            corner_rate: 0.2,
            relational_kinds: QuestionKind::ALL[4..].to_vec(),
            max_objects: 2,
        }
    }
}

impl SynthOptions {
    /// Proximity corpus: every question asks for the word closest to a
    /// highlighted sign, and half the sign entries span two words.
    pub fn proximity(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            pseudo_word_rate: 0.0,
            multiword_rate: 0.5,
            anchor_highlight: 3.0,
            corner_rate: 0.0,
            relational_kinds: vec![QuestionKind::Closest],
            ..Default::default()
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic Gaussian feature for a word.
pub fn word_feature(word: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn pseudo_word(rng: &mut ChaCha8Rng, vocab: &Vocab) -> String {
    loop {
        let len = rng.gen_range(3..=5);
        let w: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        if vocab.word_id(&w).is_none() {
            return w;
        }
    }
}

/// Seed-independent pool of letter strings.
fn pseudo_pool(size: usize, vocab: &Vocab) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(b"pseudo-word-pool"));
    let mut pool: Vec<String> = Vec::with_capacity(size);
    while pool.len() < size {
        let w = pseudo_word(&mut rng, vocab);
        if !pool.contains(&w) {
            pool.push(w);
        }
    }
    pool
}

struct Placed {
    text: String,
    bbox: [f64; 4],
    patch: PatchCoord,
}

/// Pixel box centred inside `cell`, kept well away from the cell edges.
fn place_box(rng: &mut ChaCha8Rng, grid: PatchGrid, cell: PatchCoord, text: &str, w: u32, h: u32) -> [f64; 4] {
    let (cw, ch) = (1.0 / grid.cols as f64, 1.0 / grid.rows as f64);
    let cx = (cell.col as f64 + rng.gen_range(0.35..0.65)) * cw;
    let cy = (cell.row as f64 + rng.gen_range(0.35..0.65)) * ch;
    let half_w = (0.1 + 0.07 * text.len() as f64).min(0.45) * cw;
    let half_h = 0.25 * ch;
    let (w, h) = (w as f64, h as f64);
    [
        ((cx - half_w) * w).floor().max(0.0),
        ((cy - half_h) * h).floor().max(0.0),
        ((cx + half_w) * w).ceil().min(w),
        ((cy + half_h) * h).ceil().min(h),
    ]
}

/// Index of the answer among `placed`, or `None` when the layout does not
/// single out one word by at least the margin.
pub fn resolve_answer(kind: QuestionKind, anchor: Option<usize>, patches: &[PatchCoord], grid: PatchGrid) -> Option<usize> {
    let target = match (kind, anchor) {
        (QuestionKind::Corner { bottom, right }, _) => PatchCoord {
            row: if bottom { grid.rows - 1 } else { 0 },
            col: if right { grid.cols - 1 } else { 0 },
        },
        (_, Some(a)) => patches[a],
        (_, None) => return None,
    };
    let mut scored: Vec<(f64, usize)> = patches
        .iter()
        .enumerate()
        .filter(|&(i, &p)| Some(i) != anchor && kind.admits(target, p))
        .map(|(i, &p)| (circle_distance(target, p), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    match scored.as_slice() {
        [] => None,
        [(_, i)] => Some(*i),
        [(d0, i), (d1, _), ..] => (d1 - d0 >= MARGIN).then_some(*i),
    }
}

fn sample_once(rng: &mut ChaCha8Rng, opts: &SynthOptions, vocab: &Vocab, id: String) -> Result<Option<SampleRecord>> {
    let grid = opts.grid;
    let (w, h) = (rng.gen_range(600..=1200u32), rng.gen_range(600..=1200u32));
    let k = rng.gen_range(opts.min_words..=opts.max_words);
    let mut cells: Vec<PatchCoord> = grid.cells().collect();
    cells.shuffle(rng);
    let mut signs: Vec<&str> = SIGN_WORDS.iter().copied().filter(|s| vocab.word_id(s).is_some()).collect();
    signs.shuffle(rng);
    let pool = pseudo_pool(opts.pseudo_pool, vocab);
    let mut used = std::collections::HashSet::new();
    let mut placed = Vec::with_capacity(k);
    for &cell in cells.iter().take(k) {
        let text = loop {
            let t = if rng.gen_bool(opts.pseudo_word_rate) || signs.is_empty() {
                match pool.choose(rng) {
                    Some(w) => w.clone(),
                    None => pseudo_word(rng, vocab),
                }
            } else {
                let first = signs.pop().unwrap_or_default().to_string();
                match signs.last() {
                    Some(second) if rng.gen_bool(opts.multiword_rate) => {
                        let t = format!("{first} {second}");
                        signs.pop();
                        t
                    }
                    _ => first,
                }
            };
            if used.insert(t.clone()) {
                break t;
            }
        };
        let bbox = place_box(rng, grid, cell, &text, w, h);
        placed.push(Placed { text, bbox, patch: cell });
    }
    let norm = |b: &[f64; 4]| crate::geometry::NormalizedBBox::new(b[0] / w as f64, b[1] / h as f64, b[2] / w as f64, b[3] / h as f64);
    for p in &mut placed {
        p.patch = assign_patch(&norm(&p.bbox)?, grid)?;
    }

    let kinds = if opts.relational_kinds.is_empty() || rng.gen_bool(opts.corner_rate) {
        &QuestionKind::ALL[..4]
    } else {
        &opts.relational_kinds[..]
    };
    let kind = *kinds.choose(rng).expect("non-empty");
    let anchor = if kind.needs_anchor() {
        let sign_idx: Vec<usize> = (0..placed.len()).filter(|&i| vocab.word_id(&placed[i].text).is_some()).collect();
        match sign_idx.choose(rng) {
            Some(&i) => Some(i),
            None => return Ok(None),
        }
    } else {
        None
    };
    let patches: Vec<PatchCoord> = placed.iter().map(|p| p.patch).collect();
    let Some(answer) = resolve_answer(kind, anchor, &patches, grid) else {
        return Ok(None);
    };
    let question = kind.question(anchor.map_or("", |a| placed[a].text.as_str()));

    let n_obj = rng.gen_range(0..=opts.max_objects);
    let objects = (0..n_obj)
        .map(|_| {
            let label = *OBJECT_LABELS.choose(rng).expect("non-empty");
            let cell = cells[rng.gen_range(0..cells.len())];
            ObjRecord {
                label: label.to_string(),
                bbox: place_box(rng, grid, cell, label, w, h),
                visual: word_feature(label, opts.feature_dim),
            }
        })
        .collect();
    let ocr = placed
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut visual = word_feature(&p.text, opts.feature_dim);
            if Some(i) == anchor {
                visual.iter_mut().for_each(|x| *x += opts.anchor_highlight);
            }
            OcrRecord {
                text: p.text.clone(),
                bbox: p.bbox,
                visual,
            }
        })
        .collect();
    let rec = SampleRecord {
        id,
        image_w: w,
        image_h: h,
        question,
        ocr,
        objects,
        answers: vec![placed[answer].text.clone(); NUM_ANSWERS],
    };
    rec.validate()?;
    Ok(Some(rec))
}

pub fn synth_generate(opts: &SynthOptions, vocab: &Vocab) -> Result<Vec<SampleRecord>> {
    if opts.n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    if opts.min_words < 2 || opts.min_words > opts.max_words || opts.max_words > opts.grid.rows * opts.grid.cols {
        return Err(Error::Config(format!(
            "word count range {}..={} does not fit the grid",
            opts.min_words, opts.max_words
        )));
    }
    for (name, rate) in [
        ("pseudo_word_rate", opts.pseudo_word_rate),
        ("multiword_rate", opts.multiword_rate),
        ("corner_rate", opts.corner_rate),
    ] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("{name} {rate} outside [0, 1]")));
        }
    }
    if opts.relational_kinds.iter().any(|k| !k.needs_anchor()) {
        return Err(Error::Config("relational_kinds may not list corner questions".into()));
    }
    if !opts.anchor_highlight.is_finite() {
        return Err(Error::Config("anchor_highlight must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(opts.n);
    while out.len() < opts.n {
        let id = format!("synth-{}-{:05}", opts.seed, out.len());
        if let Some(r) = sample_once(&mut rng, opts, vocab, id)? {
            out.push(r);
        }
    }
    Ok(out)
}
