//! Synthetic multilingual image-translation tasks.
//!
//! Each language maps 40 shared concepts onto its own block of surface tokens
//! and applies a word-order rule. A sample renders the source sentence into a
//! 7-row bitmap with a fixed 5×7 font; the target is the sentence in the
//! target language.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::PixelGrid;
use crate::vocab::{self, TokenId, TokenSeq};

pub const CONCEPTS: usize = 40;
pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 7;
pub const DISPLAY_LEN: usize = 3;
pub const GLYPH_GAP: usize = 1;
pub const TOKEN_GAP: usize = 3;
pub const MIN_SENTENCE: usize = 3;
pub const MAX_SENTENCE: usize = 8;

const ALPHABET: &[u8; 36] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderRule {
    Identity,
    Reverse,
    SwapAdjacentPairs,
}

impl OrderRule {
    pub fn apply<T: Clone>(&self, seq: &[T]) -> Vec<T> {
        match self {
            OrderRule::Identity => seq.to_vec(),
            OrderRule::Reverse => seq.iter().rev().cloned().collect(),
            OrderRule::SwapAdjacentPairs => {
                let mut out = seq.to_vec();
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: usize,
    /// `surface[concept]` is the token for that concept.
    pub surface: Vec<TokenId>,
    pub order: OrderRule,
}

impl LanguageSpec {
    pub fn word(&self, concept: usize) -> TokenId {
        self.surface[concept]
    }

    pub fn concept_of(&self, token: TokenId) -> Option<usize> {
        self.surface.iter().position(|&t| t == token)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub source: LanguageSpec,
    pub target: LanguageSpec,
}

impl TaskSpec {
    pub fn new(id: usize, source: LanguageSpec, target: LanguageSpec) -> Result<Self> {
        if source.id == target.id {
            return Err(Error::Validation(format!("task {id}: source and target language are both {}", source.id)));
        }
        Ok(Self { id, source, target })
    }

    /// `order_target(map_target(map_source⁻¹(s)))`.
    pub fn translate(&self, source: &[TokenId]) -> Option<TokenSeq> {
        let words = source
            .iter()
            .map(|&t| self.source.concept_of(t).map(|c| self.target.word(c)))
            .collect::<Option<Vec<_>>>()?;
        Some(self.target.order.apply(&words))
    }

    pub fn label(&self) -> String {
        format!("L{}->L{}", self.source.id + 1, self.target.id + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Score,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Score, Split::Eval];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Score => "score",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "score" => Ok(Split::Score),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Score => 0x7363_6f72_6500_0002,
            Split::Eval => 0x6576_616c_0000_0003,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstructionKind {
    OcrProbe,
    Translate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub grid: PixelGrid,
    pub source: TokenSeq,
    pub target: TokenSeq,
}

/// 5×7 glyphs for `A–Z` and `0–9`; each row is 5 bits, most significant bit leftmost.
pub struct FontTable {
    glyphs: [[u8; GLYPH_HEIGHT]; 36],
}

#[rustfmt::skip]
const GLYPHS: [[u8; GLYPH_HEIGHT]; 36] = [
    [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // A
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110], // B
    [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110], // C
    [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110], // D
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111], // E
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000], // F
    [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111], // G
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // H
    [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // I
    [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100], // J
    [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001], // K
    [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111], // L
    [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001], // M
    [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001], // N
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // O
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000], // P
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101], // Q
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001], // R
    [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110], // S
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100], // T
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // U
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100], // V
    [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010], // W
    [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001], // X
    [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100], // Y
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111], // Z
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

impl Default for FontTable {
    fn default() -> Self {
        Self { glyphs: GLYPHS }
    }
}

impl FontTable {
    pub fn glyph(&self, ch: char) -> Result<&[u8; GLYPH_HEIGHT]> {
        let idx = match ch {
            'A'..='Z' => ch as usize - 'A' as usize,
            '0'..='9' => 26 + ch as usize - '0' as usize,
            _ => return Err(Error::UnsupportedChar(ch)),
        };
        Ok(&self.glyphs[idx])
    }

    /// SHA-256 over the glyph rows in table order; identifies the font version.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for g in &self.glyphs {
            h.update(g);
        }
        hex::encode(h.finalize())
    }
}

/// Fixed 3-character display string of a surface token.
pub fn display_string(token: TokenId) -> String {
    // 7919 is coprime with 36³, so the map is injective over all ids.
    let mut code = (token as u64 * 7919 + 1234) % 36u64.pow(DISPLAY_LEN as u32);
    let mut chars = [0u8; DISPLAY_LEN];
    for c in chars.iter_mut().rev() {
        *c = ALPHABET[(code % 36) as usize];
        code /= 36;
    }
    String::from_utf8(chars.to_vec()).expect("ASCII")
}

/// Unpadded width of a rendering with `glyphs` characters split over `tokens` tokens.
pub fn layout_width(glyphs: usize, tokens: usize) -> usize {
    if glyphs == 0 {
        return 0;
    }
    (GLYPH_WIDTH + GLYPH_GAP) * glyphs - GLYPH_GAP + (TOKEN_GAP - GLYPH_GAP) * (tokens - 1)
}

/// Renders display strings left to right, right-padded to a multiple of `patch_cols`.
pub fn render_strings(words: &[String], font: &FontTable, patch_cols: usize) -> Result<PixelGrid> {
    let glyphs: usize = words.iter().map(|w| w.chars().count()).sum();
    let raw = layout_width(glyphs, words.len());
    let width = raw.div_ceil(patch_cols).max(1) * patch_cols;
    let mut grid = PixelGrid::blank(GLYPH_HEIGHT, width);
    let mut col = 0;
    for (wi, word) in words.iter().enumerate() {
        if wi > 0 {
            col += TOKEN_GAP - GLYPH_GAP;
        }
        for (ci, ch) in word.chars().enumerate() {
            if ci > 0 || wi > 0 {
                col += GLYPH_GAP;
            }
            let rows = font.glyph(ch)?;
            for (r, bits) in rows.iter().enumerate() {
                for c in 0..GLYPH_WIDTH {
                    if bits >> (GLYPH_WIDTH - 1 - c) & 1 == 1 {
                        grid.set(r, col + c, 1);
                    }
                }
            }
            col += GLYPH_WIDTH;
        }
    }
    Ok(grid)
}

pub fn render_text(tokens: &[TokenId], font: &FontTable, patch_cols: usize) -> Result<PixelGrid> {
    let words: Vec<String> = tokens.iter().map(|&t| display_string(t)).collect();
    render_strings(&words, font, patch_cols)
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a base seed and a list of stream labels.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix64(base), |acc, &l| mix64(acc ^ mix64(l)))
}

/// `n` languages over disjoint blocks of a seeded shuffle of the surface vocabulary.
/// Order rules are assigned round-robin: identity, reverse, swap-adjacent-pairs.
pub fn make_languages(n: usize, seed: u64) -> Result<Vec<LanguageSpec>> {
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 languages, got {n}")));
    }
    if n * CONCEPTS > vocab::SURFACE_VOCAB as usize || n > vocab::MAX_LANGUAGES {
        return Err(Error::Validation(format!(
            "{n} languages × {CONCEPTS} concepts exceed the {}-token surface vocabulary",
            vocab::SURFACE_VOCAB
        )));
    }
    let mut ids: Vec<TokenId> = (0..vocab::SURFACE_VOCAB).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6c61_6e67])));
    let rules = [OrderRule::Identity, OrderRule::Reverse, OrderRule::SwapAdjacentPairs];
    Ok((0..n)
        .map(|id| LanguageSpec {
            id,
            surface: ids[id * CONCEPTS..(id + 1) * CONCEPTS].to_vec(),
            order: rules[id % rules.len()],
        })
        .collect())
}

/// Tasks `L1→L2, L2→L3, …, Ln→L1`.
pub fn ring_tasks(languages: &[LanguageSpec]) -> Result<Vec<TaskSpec>> {
    let n = languages.len();
    (0..n).map(|i| TaskSpec::new(i, languages[i].clone(), languages[(i + 1) % n].clone())).collect()
}

pub fn sample_dataset(task: &TaskSpec, n: usize, seed: u64, split: Split, patch_cols: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Validation("dataset size must be >= 1".into()));
    }
    let font = FontTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[task.id as u64, split.salt()]));
    (0..n)
        .map(|_| {
            let len = rng.gen_range(MIN_SENTENCE..=MAX_SENTENCE);
            let concepts: Vec<usize> = (0..len).map(|_| rng.gen_range(0..CONCEPTS)).collect();
            let source: TokenSeq = concepts.iter().map(|&c| task.source.word(c)).collect();
            let target = task.translate(&source).expect("source drawn from the source language");
            let grid = render_text(&source, &font, patch_cols)?;
            Ok(Sample { grid, source, target })
        })
        .collect()
}

pub fn instruction_tokens(task: &TaskSpec, kind: InstructionKind) -> TokenSeq {
    match kind {
        InstructionKind::OcrProbe => vec![vocab::OCR],
        InstructionKind::Translate => {
            vec![vocab::TRANSLATE, vocab::lang_token(task.source.id), vocab::lang_token(task.target.id)]
        }
    }
}

/// Supervision target for an instruction kind: transcription for the OCR probe, translation otherwise.
pub fn supervision(sample: &Sample, kind: InstructionKind) -> &[TokenId] {
    match kind {
        InstructionKind::OcrProbe => &sample.source,
        InstructionKind::Translate => &sample.target,
    }
}

/// Run-length encoding of a grid: `HxW:` then alternating run lengths starting with background.
pub fn grid_to_rle(grid: &PixelGrid) -> String {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut count = 0usize;
    for &p in &grid.pixels {
        if p == current {
            count += 1;
        } else {
            runs.push(count.to_string());
            current = p;
            count = 1;
        }
    }
    runs.push(count.to_string());
    format!("{}x{}:{}", grid.height, grid.width, runs.join(","))
}

pub fn grid_from_rle(s: &str) -> Result<PixelGrid> {
    let bad = || Error::Format(format!("bad grid encoding {s:?}"));
    let (dims, runs) = s.split_once(':').ok_or_else(bad)?;
    let (h, w) = dims.split_once('x').ok_or_else(bad)?;
    let height: usize = h.parse().map_err(|_| bad())?;
    let width: usize = w.parse().map_err(|_| bad())?;
    let mut pixels = Vec::with_capacity(height * width);
    for (i, r) in runs.split(',').enumerate() {
        let n: usize = r.parse().map_err(|_| bad())?;
        pixels.extend(std::iter::repeat_n((i % 2) as u8, n));
    }
    if pixels.len() != height * width {
        return Err(bad());
    }
    Ok(PixelGrid { height, width, pixels })
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_ids(s: &str) -> Result<TokenSeq> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad token id {t:?}"))))
        .collect()
}

/// One tab-separated record per line: `task  split  s-ids  t-ids  grid-rle`.
pub fn dump_dataset(task_id: usize, split: Split, samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            task_id,
            split,
            join_ids(&s.source),
            join_ids(&s.target),
            grid_to_rle(&s.grid)
        ));
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Vec<(usize, Split, Sample)>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!("expected 5 fields, got {}", fields.len())));
            }
            let task = fields[0].parse().map_err(|_| Error::Format(format!("bad task id {:?}", fields[0])))?;
            let split = Split::parse(fields[1])?;
            let sample = Sample { source: parse_ids(fields[2])?, target: parse_ids(fields[3])?, grid: grid_from_rle(fields[4])? };
            Ok((task, split, sample))
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_dataset(&text)?.into_iter().map(|(_, _, s)| s).collect())
}
