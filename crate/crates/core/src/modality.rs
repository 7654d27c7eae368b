//! Camera, instruction and proprioception tokenizers, and assembly of the
//! shared prefix `[visual | language+proprio | tactile]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use tacvla_nn::{Graph, Linear, ParamId, ParamStore, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::tactile::{TactileTokens, TOKENS as TAC_TOKENS};

pub const IMG: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMG_LEN: usize = IMG * IMG * CHANNELS;
pub const PATCH: usize = 8;
pub const PATCHES: usize = (IMG / PATCH) * (IMG / PATCH);
pub const PATCH_LEN: usize = PATCH * PATCH * CHANNELS;
pub const VIS_TOKENS: usize = 2 * PATCHES;
pub const WORD_SLOTS: usize = 16;
pub const LANG_TOKENS: usize = WORD_SLOTS + 1;
pub const PROPRIO_DIM: usize = 8;
pub const SEQ_LEN: usize = VIS_TOKENS + LANG_TOKENS + TAC_TOKENS;
pub const OFFSETS: [usize; 3] = [0, VIS_TOKENS, VIS_TOKENS + LANG_TOKENS];

/// Pixel value of a blocked front camera.
pub const OCCLUSION_VALUE: f64 = 0.0;

/// Two 32x32 RGB frames, stored height-width-channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageObs {
    pub front: Vec<f64>,
    pub wrist: Vec<f64>,
    pub front_blocked: bool,
}

impl ImageObs {
    pub fn new(front: Vec<f64>, wrist: Vec<f64>) -> Result<Self> {
        for (name, img) in [("front", &front), ("wrist", &wrist)] {
            if img.len() != IMG_LEN {
                return Err(CoreError::Config(format!("{name} image has {} values, need {IMG_LEN}", img.len())));
            }
            if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CoreError::Config(format!("{name} image has values outside [0, 1]")));
            }
        }
        Ok(Self {
            front,
            wrist,
            front_blocked: false,
        })
    }

    pub fn block_front(&mut self) {
        self.front.fill(OCCLUSION_VALUE);
        self.front_blocked = true;
    }
}

/// Splits an image into 16 row-major 8x8 patches of 192 values each.
pub fn patches(img: &[f64]) -> Vec<f64> {
    let per_side = IMG / PATCH;
    let mut out = Vec::with_capacity(IMG_LEN);
    for pr in 0..per_side {
        for pc in 0..per_side {
            for y in 0..PATCH {
                let start = ((pr * PATCH + y) * IMG + pc * PATCH) * CHANNELS;
                out.extend_from_slice(&img[start..start + PATCH * CHANNELS]);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    TightShaft,
    PressClip,
    ShaftRotation,
    Slide,
    #[serde(rename = "inbox")]
    InBox,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::TightShaft,
        TaskId::PressClip,
        TaskId::ShaftRotation,
        TaskId::Slide,
        TaskId::InBox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::TightShaft => "tight_shaft",
            TaskId::PressClip => "press_clip",
            TaskId::ShaftRotation => "shaft_rotation",
            TaskId::Slide => "slide",
            TaskId::InBox => "inbox",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CoreError::UnknownTask(s.to_string()))
    }
}

pub const PROMPT_TABLE: &str = include_str!("../data/prompts.txt");
pub const VOCAB_FILE: &str = include_str!("../data/vocab.txt");
pub const PAD_ID: usize = 0;

fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

struct Lexicon {
    prompts: BTreeMap<TaskId, String>,
    vocab: BTreeMap<String, usize>,
}

fn lexicon() -> &'static Lexicon {
    static LEX: OnceLock<Lexicon> = OnceLock::new();
    LEX.get_or_init(|| {
        let mut prompts = BTreeMap::new();
        for line in PROMPT_TABLE.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let (id, text) = line.split_once('\t').expect("prompt table row is `id<TAB>text`");
            prompts.insert(id.parse::<TaskId>().expect("prompt table task id"), text.to_string());
        }
        let mut vocab = BTreeMap::new();
        for line in VOCAB_FILE.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let (w, id) = line.split_once(' ').expect("vocab row is `word id`");
            vocab.insert(w.to_string(), id.parse().expect("vocab id"));
        }
        Lexicon { prompts, vocab }
    })
}

pub fn prompt(task: TaskId) -> &'static str {
    &lexicon().prompts[&task]
}

pub fn vocab_size() -> usize {
    lexicon().vocab.len()
}

pub fn vocab() -> &'static BTreeMap<String, usize> {
    &lexicon().vocab
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub task: TaskId,
    pub token_ids: Vec<usize>,
}

impl Instruction {
    /// Lowercased, punctuation-stripped prompt words, truncated to 16 ids.
    pub fn for_task(task: TaskId) -> Self {
        let lex = lexicon();
        let token_ids = normalize_words(prompt(task))
            .iter()
            .take(WORD_SLOTS)
            .map(|w| lex.vocab[w])
            .collect();
        Self { task, token_ids }
    }

    pub fn parse(task: &str) -> Result<Self> {
        Ok(Self::for_task(task.parse()?))
    }

    /// The 16 word slots, right-padded with the pad id.
    pub fn slot_ids(&self) -> [usize; WORD_SLOTS] {
        let mut ids = [PAD_ID; WORD_SLOTS];
        ids[..self.token_ids.len()].copy_from_slice(&self.token_ids);
        ids
    }
}

/// Planar pose `(x, y, theta)`, aperture, velocity `(vx, vy, omega)` and a
/// contact-normal slot that is always zero here.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proprio {
    pub state: [f64; PROPRIO_DIM],
}

/// Fixed per-feature scale so every input is O(1). Velocities are in m/s and rad/s.
pub const PROPRIO_SCALE: [f64; PROPRIO_DIM] = [2.5, 2.5, 1.0 / 0.3, 1.0, 2.0, 2.0, 1.0 / 3.0, 1.0];

impl Proprio {
    pub fn new(state: [f64; PROPRIO_DIM]) -> Result<Self> {
        if state.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Config("proprio has non-finite entries".into()));
        }
        if !(0.0..=1.0).contains(&state[3]) {
            return Err(CoreError::Config(format!("aperture {} outside [0, 1]", state[3])));
        }
        Ok(Self { state })
    }

    pub fn features(&self) -> [f64; PROPRIO_DIM] {
        let mut f = self.state;
        for (x, s) in f.iter_mut().zip(PROPRIO_SCALE) {
            *x *= s;
        }
        f
    }
}

/// Linear patch projector plus a learned per-patch position table (32 rows).
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub proj: Linear,
    pub pos: ParamId,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "vision.proj", PATCH_LEN, dim, true, rng)?,
            pos: store.add("vision.pos", Tensor::randn(&[VIS_TOKENS, dim], 0.02, rng))?,
        })
    }

    /// `patches` is `(B * 32, 192)` with front patches before wrist patches.
    pub fn forward(&self, g: &mut Graph<'_>, patches: Var) -> Result<Var> {
        let n = g.value(patches).rows();
        let x = self.proj.forward(g, patches)?;
        let table = g.param(self.pos);
        let pos = g.embed(table, (0..n).map(|i| i % VIS_TOKENS).collect())?;
        Ok(g.add(x, pos)?)
    }

    pub fn encode(&self, store: &ParamStore, obs: &ImageObs) -> Result<Tensor> {
        let mut g = Graph::with_store(store);
        let p = g.input(image_patches(&[obs])?);
        let y = self.forward(&mut g, p)?;
        Ok(g.value(y).clone())
    }
}

/// `(B * 32, 192)` patch matrix for a batch of observations.
pub fn image_patches(obs: &[&ImageObs]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(obs.len() * 2 * IMG_LEN);
    for o in obs {
        data.extend(patches(&o.front));
        data.extend(patches(&o.wrist));
    }
    Ok(Tensor::new(vec![obs.len() * VIS_TOKENS, PATCH_LEN], data)?)
}

#[derive(Clone, Debug)]
pub struct LangProprioEncoder {
    pub words: ParamId,
    pub pos: ParamId,
    pub proprio: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LangProprioTokens {
    pub tokens: Tensor,
    pub participation: Vec<bool>,
}

impl LangProprioEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            words: store.add("lang.words", Tensor::randn(&[vocab_size(), dim], 0.5, rng))?,
            pos: store.add("lang.pos", Tensor::randn(&[LANG_TOKENS, dim], 0.02, rng))?,
            proprio: Linear::new(store, "lang.proprio", PROPRIO_DIM, dim, true, rng)?,
        })
    }

    /// Returns `(B * 16, d)` word tokens and `(B, d)` proprio tokens.
    pub fn forward(&self, g: &mut Graph<'_>, ids: &[[usize; WORD_SLOTS]], proprio: Var) -> Result<(Var, Var)> {
        let b = ids.len();
        let table = g.param(self.words);
        let w = g.embed(table, ids.iter().flatten().copied().collect())?;
        let pos_table = g.param(self.pos);
        let wpos = g.embed(pos_table, (0..b * WORD_SLOTS).map(|i| i % WORD_SLOTS).collect())?;
        let words = g.add(w, wpos)?;
        let p = self.proprio.forward(g, proprio)?;
        let ppos = g.embed(pos_table, vec![WORD_SLOTS; b])?;
        let prop = g.add(p, ppos)?;
        Ok((words, prop))
    }

    pub fn encode(&self, store: &ParamStore, instr: &Instruction, proprio: &Proprio) -> Result<LangProprioTokens> {
        let mut g = Graph::with_store(store);
        let pv = g.input(Tensor::new(vec![1, PROPRIO_DIM], proprio.features().to_vec())?);
        let (w, p) = self.forward(&mut g, &[instr.slot_ids()], pv)?;
        let s = g.stack_rows(vec![(w, 0, WORD_SLOTS), (p, 0, 1)])?;
        Ok(LangProprioTokens {
            tokens: g.value(s).clone(),
            participation: lang_participation(instr),
        })
    }
}

pub fn lang_participation(instr: &Instruction) -> Vec<bool> {
    let mut p = vec![false; LANG_TOKENS];
    p[..instr.token_ids.len()].fill(true);
    p[WORD_SLOTS] = true;
    p
}

/// Shared prefix with one participation flag per token.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedTokenSequence {
    pub tokens: Tensor,
    pub participation: Vec<bool>,
    pub segment_offsets: [usize; 3],
}

impl GatedTokenSequence {
    pub fn len(&self) -> usize {
        self.participation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participation.is_empty()
    }

    /// Row of the proprio token, the last language+proprio slot.
    pub fn proprio_row(&self) -> usize {
        self.segment_offsets[2] - 1
    }

    /// The same sequence with the tactile segment physically removed.
    pub fn without_tactile(&self) -> Result<GatedTokenSequence> {
        let keep = self.segment_offsets[2];
        let d = self.tokens.cols();
        Ok(GatedTokenSequence {
            tokens: Tensor::new(vec![keep, d], self.tokens.data()[..keep * d].to_vec())?,
            participation: self.participation[..keep].to_vec(),
            segment_offsets: self.segment_offsets,
        })
    }
}

pub fn assemble_prefix(vis: &Tensor, lang_pro: &LangProprioTokens, gated_tac: &TactileTokens) -> Result<GatedTokenSequence> {
    let check = |segment, got, expected| {
        if got == expected {
            Ok(())
        } else {
            Err(CoreError::SegmentLength { segment, got, expected })
        }
    };
    check("visual", vis.rows(), VIS_TOKENS)?;
    check("language+proprio", lang_pro.tokens.rows(), LANG_TOKENS)?;
    check("language+proprio mask", lang_pro.participation.len(), LANG_TOKENS)?;
    check("tactile", gated_tac.tokens.rows(), TAC_TOKENS)?;
    check("tactile mask", gated_tac.gate_mask.len(), TAC_TOKENS)?;
    let d = vis.cols();
    if lang_pro.tokens.cols() != d || gated_tac.tokens.cols() != d {
        return Err(CoreError::Mismatch("segments have different token widths".into()));
    }
    let mut data = Vec::with_capacity(SEQ_LEN * d);
    data.extend_from_slice(vis.data());
    data.extend_from_slice(lang_pro.tokens.data());
    data.extend_from_slice(gated_tac.tokens.data());
    let mut participation = vec![true; VIS_TOKENS];
    participation.extend_from_slice(&lang_pro.participation);
    participation.extend_from_slice(&gated_tac.gate_mask);
    Ok(GatedTokenSequence {
        tokens: Tensor::new(vec![SEQ_LEN, d], data)?,
        participation,
        segment_offsets: OFFSETS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_file_matches_prompt_words() {
        let mut words: Vec<String> = TaskId::ALL.iter().flat_map(|&t| normalize_words(prompt(t))).collect();
        words.sort();
        words.dedup();
        assert_eq!(vocab().len(), words.len() + 1);
        for (i, w) in words.iter().enumerate() {
            assert_eq!(vocab()[w], i + 1);
        }
        assert_eq!(vocab()["<pad>"], PAD_ID);
    }

    #[test]
    fn instructions_are_deterministic_and_bounded() {
        for t in TaskId::ALL {
            let a = Instruction::for_task(t);
            assert_eq!(a, Instruction::for_task(t));
            assert!(!a.token_ids.is_empty() && a.token_ids.len() <= WORD_SLOTS);
        }
        assert_eq!(Instruction::for_task(TaskId::InBox).token_ids.len(), WORD_SLOTS);
        assert!(Instruction::parse("peg_in_hole").is_err());
    }

    #[test]
    fn shared_prefix_words_share_leading_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = LangProprioEncoder::new(&mut store, 8, &mut rng).unwrap();
        let p = Proprio::new([0.0; 8]).unwrap();
        let a = Instruction::for_task(TaskId::ShaftRotation).slot_ids();
        let b = Instruction::for_task(TaskId::Slide).slot_ids();
        let ta = enc.encode(&store, &Instruction::for_task(TaskId::ShaftRotation), &p).unwrap();
        let tb = enc.encode(&store, &Instruction::for_task(TaskId::Slide), &p).unwrap();
        // Both start "<verb> the object ..."
        assert_eq!(a[1..3], b[1..3]);
        for i in 0..WORD_SLOTS {
            assert_eq!(ta.tokens.row(i) == tb.tokens.row(i), a[i] == b[i], "slot {i}");
        }
    }

    #[test]
    fn zero_proprio_is_its_slot_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = LangProprioEncoder::new(&mut store, 8, &mut rng).unwrap();
        let t = enc
            .encode(&store, &Instruction::for_task(TaskId::Slide), &Proprio::new([0.0; 8]).unwrap())
            .unwrap();
        assert_eq!(t.tokens.row(WORD_SLOTS), store.value(enc.pos).row(WORD_SLOTS));
    }

    #[test]
    fn zero_front_image_gives_position_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(&mut store, 8, &mut rng).unwrap();
        let wrist: Vec<f64> = (0..IMG_LEN).map(|i| (i % 7) as f64 / 7.0).collect();
        let obs = ImageObs::new(vec![0.0; IMG_LEN], wrist).unwrap();
        let t = enc.encode(&store, &obs).unwrap();
        for i in 0..PATCHES {
            assert_eq!(t.row(i), store.value(enc.pos).row(i));
        }
    }

    #[test]
    fn patch_layout_is_row_major() {
        let img: Vec<f64> = (0..IMG_LEN).map(|i| i as f64).collect();
        let p = patches(&img);
        // Patch 1 starts at pixel (0, 8).
        assert_eq!(p[PATCH_LEN], (8 * CHANNELS) as f64);
        // Patch 4 starts at pixel (8, 0).
        assert_eq!(p[4 * PATCH_LEN], (8 * IMG * CHANNELS) as f64);
    }

    #[test]
    fn offsets_follow_segment_lengths() {
        assert_eq!(OFFSETS, [0, 32, 49]);
        assert_eq!(SEQ_LEN, 85);
    }

    #[test]
    fn segment_length_mismatch_is_error() {
        let lp = LangProprioTokens {
            tokens: Tensor::zeros(&[LANG_TOKENS, 4]),
            participation: vec![true; LANG_TOKENS],
        };
        let tac = TactileTokens {
            tokens: Tensor::zeros(&[TAC_TOKENS, 4]),
            gate_mask: vec![true; TAC_TOKENS],
        };
        assert!(assemble_prefix(&Tensor::zeros(&[31, 4]), &lp, &tac).is_err());
        assert!(assemble_prefix(&Tensor::zeros(&[32, 4]), &lp, &tac).is_ok());
    }
}
