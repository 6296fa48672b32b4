//! Closed vocabulary, tokenizer, and the small trainable text encoder that
//! produces the cross-attention conditioning sequence.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, NormLayer, ParamInit};
use crate::tensor::{LayerParams, Tensor};
use crate::{Error, Result};

pub const PAD: u32 = 0;

/// Every word the pipeline can read or emit. Reports, prompts, and the text
/// encoder all share this list; ids are stable by construction.
const WORDS: &[&str] = &[
    "<pad>",
    // punctuation
    ",",
    ".",
    ":",
    // laterality and framing
    "left",
    "right",
    "eye",
    "ffa",
    // lesion terms
    "microaneurysms",
    "leakage",
    "non-perfusion",
    "neovascularization",
    "disc",
    "staining",
    "macular",
    "edema",
    // additional clinical vocabulary accepted in prompts
    "tortuous",
    "brvo",
    "crvo",
    "npdr",
    "pcv",
    "amd",
    "csc",
    "rp",
    // template words
    "no",
    "obvious",
    "abnormalities",
    "scattered",
    "hyperfluorescent",
    "dots",
    "persist",
    "through",
    "venous",
    "and",
    "late",
    "frames",
    "dye",
    "blobs",
    "enlarge",
    "brighten",
    "in",
    "capillary",
    "areas",
    "appear",
    "dark",
    "empty",
    "new",
    "vessel",
    "tufts",
    "sprout",
    "with",
    "fuzzy",
    "margins",
    "the",
    "rim",
    "stains",
    "brightly",
    "thickens",
    "around",
    "macula",
];

pub struct Vocab {
    index: BTreeMap<&'static str, u32>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        WORDS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&'static str> {
        WORDS.get(id as usize).copied()
    }

    /// Tokenize free text: lowercase, split whitespace, detach `,` `.` `:`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let mut rest = lower.as_str();
            while !rest.is_empty() {
                // Leading punctuation
                if let Some(p) = rest.chars().next().filter(|c| matches!(c, ',' | '.' | ':')) {
                    ids.push(self.id(&p.to_string()).expect("punctuation in vocab"));
                    rest = &rest[p.len_utf8()..];
                    continue;
                }
                // Word body up to the next punctuation mark
                let cut = rest.find([',', '.', ':']).unwrap_or(rest.len());
                let word = &rest[..cut];
                let id = self.id(word).ok_or_else(|| {
                    Error::invalid(format!("word {word:?} is outside the closed vocabulary"))
                })?;
                ids.push(id);
                rest = &rest[cut..];
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD {
                continue;
            }
            let w = self.word(id).unwrap_or("<?>");
            if !out.is_empty() && !matches!(w, "," | "." | ":") {
                out.push(' ');
            } else if !out.is_empty() {
                // punctuation binds to the previous word in rendered text
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

pub fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        let mut index = BTreeMap::new();
        for (i, w) in WORDS.iter().enumerate() {
            index.insert(*w, i as u32);
        }
        assert_eq!(index.len(), WORDS.len(), "duplicate vocabulary words");
        Vocab { index }
    })
}

/// Token ids plus padding mask, fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: Vec<u32>,
    /// true = real token, false = padding (masked).
    pub mask: Vec<bool>,
}

impl PromptTokens {
    pub fn from_ids(mut ids: Vec<u32>, max_len: usize) -> Result<Self> {
        let v = vocab().len() as u32;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("token id {bad} >= vocabulary size {v}")));
        }
        ids.truncate(max_len);
        let mut mask = vec![true; ids.len()];
        while ids.len() < max_len {
            ids.push(PAD);
            mask.push(false);
        }
        Ok(PromptTokens { ids, mask })
    }

    pub fn from_text(text: &str, max_len: usize) -> Result<Self> {
        Self::from_ids(vocab().tokenize(text)?, max_len)
    }

    /// The all-masked prompt: the unconditional embedding.
    pub fn unconditional(max_len: usize) -> Self {
        PromptTokens { ids: vec![PAD; max_len], mask: vec![false; max_len] }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig { width: 64, blocks: 2, heads: 2, max_len: 24 }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.max_len == 0 || self.blocks == 0 {
            return Err(Error::Config("text encoder needs max_len >= 1 and blocks >= 1".into()));
        }
        Ok(())
    }
}

struct TextBlock {
    ln1: NormLayer,
    qkv: Linear,
    proj: Linear,
    ln2: NormLayer,
    fc1: Linear,
    fc2: Linear,
}

/// Token + positional embeddings through a small pre-LN self-attention stack;
/// masked positions output exact zeros.
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub params: LayerParams,
    emb_path: String,
    pos_path: String,
    blocks: Vec<TextBlock>,
    final_ln: NormLayer,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = LayerParams::new();
        let mut init = ParamInit::new(&mut params, rng);
        let w = cfg.width;
        let v = vocab().len();
        init.params.insert(
            "text.token_embedding",
            Tensor::randn_scaled(&[v, w], 0.02, init.rng),
        )?;
        init.params.insert(
            "text.position_embedding",
            Tensor::randn_scaled(&[cfg.max_len, w], 0.02, init.rng),
        )?;
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            let p = format!("text.block{b}");
            blocks.push(TextBlock {
                ln1: NormLayer::init(&mut init, &format!("{p}.ln1"), w)?,
                qkv: Linear::init(&mut init, &format!("{p}.qkv"), w, 3 * w)?,
                proj: Linear::init(&mut init, &format!("{p}.proj"), w, w)?,
                ln2: NormLayer::init(&mut init, &format!("{p}.ln2"), w)?,
                fc1: Linear::init(&mut init, &format!("{p}.fc1"), w, 4 * w)?,
                fc2: Linear::init(&mut init, &format!("{p}.fc2"), 4 * w, w)?,
            });
        }
        let final_ln = NormLayer::init(&mut init, "text.final_ln", w)?;
        Ok(TextEncoder {
            cfg,
            params,
            emb_path: "text.token_embedding".into(),
            pos_path: "text.position_embedding".into(),
            blocks,
            final_ln,
        })
    }

    /// Conditioning sequence for a batch of prompts: [B, L, width].
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        params: &LayerParams,
        prompts: &[PromptTokens],
    ) -> Result<(NodeId, Vec<bool>)> {
        if prompts.is_empty() {
            return Err(Error::invalid("encode_text requires at least one prompt"));
        }
        let l = self.cfg.max_len;
        for p in prompts {
            if p.ids.len() != l || p.mask.len() != l {
                return Err(Error::shape(format!(
                    "prompt length {} != configured max_len {l}",
                    p.ids.len()
                )));
            }
        }
        let b = prompts.len();
        let w = self.cfg.width;
        let mut ids = Vec::with_capacity(b * l);
        let mut mask = Vec::with_capacity(b * l);
        for p in prompts {
            ids.extend_from_slice(&p.ids);
            mask.extend_from_slice(&p.mask);
        }

        let table = g.param(&self.emb_path, params.get(&self.emb_path)?);
        let tok = g.embedding(table, Arc::new(ids))?;
        let mut x = g.reshape(tok, &[b, l, w])?;
        let pos = g.param(&self.pos_path, params.get(&self.pos_path)?);
        let pos = g.reshape(pos, &[1, l, w])?;
        let pos = g.expand(pos, &[b, l, w])?;
        x = g.add(x, pos)?;

        let heads = self.cfg.heads;
        let attn_mask = key_padding_mask(b, heads, l, l, &mask);
        for blk in &self.blocks {
            let y = blk.ln1.layer_norm(g, params, x)?;
            let qkv = blk.qkv.forward(g, params, y)?;
            let (q, k, v) = split_qkv(g, qkv, b, l, w)?;
            let qh = split_heads(g, q, b, l, heads, w / heads)?;
            let kh = split_heads(g, k, b, l, heads, w / heads)?;
            let vh = split_heads(g, v, b, l, heads, w / heads)?;
            let (att, _) = g.attention_masked(qh, kh, vh, Some(attn_mask.clone()))?;
            let att = merge_heads(g, att, b, l, heads, w / heads)?;
            let att = blk.proj.forward(g, params, att)?;
            x = g.add(x, att)?;

            let y = blk.ln2.layer_norm(g, params, x)?;
            let h = blk.fc1.forward(g, params, y)?;
            let h = g.gelu(h);
            let h = blk.fc2.forward(g, params, h)?;
            x = g.add(x, h)?;
        }
        x = self.final_ln.layer_norm(g, params, x)?;

        // Zero the masked positions.
        let maskf: Vec<f32> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
        let mnode = g.input(&[b, l, 1], maskf)?;
        let mnode = g.expand(mnode, &[b, l, w])?;
        x = g.mul(x, mnode)?;
        Ok((x, mask))
    }

    /// Plain (non-graph) encoding of prompts.
    pub fn encode(&self, prompts: &[PromptTokens]) -> Result<Conditioning> {
        let mut g = Graph::new();
        let (node, mask) = self.encode_graph(&mut g, &self.params, prompts)?;
        let seq = g.tensor(node);
        seq.check_finite("encode_text")?;
        Ok(Conditioning { seq, mask })
    }
}

/// Encoded text: sequence tensor [B, L, width] plus the key padding mask.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub seq: Tensor,
    pub mask: Vec<bool>,
}

// -- attention plumbing shared with the DiT ---------------------------------

/// Split a fused [B, L, 3w] projection into three [B, L, w] nodes.
pub fn split_qkv(
    g: &mut Graph,
    qkv: NodeId,
    b: usize,
    l: usize,
    w: usize,
) -> Result<(NodeId, NodeId, NodeId)> {
    let mut maps: [Vec<u32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (part, map) in maps.iter_mut().enumerate() {
        map.reserve(b * l * w);
        for bi in 0..b {
            for li in 0..l {
                let base = ((bi * l) + li) * 3 * w + part * w;
                for wi in 0..w {
                    map.push((base + wi) as u32);
                }
            }
        }
    }
    let [mq, mk, mv] = maps;
    let q = g.index_map(qkv, Arc::new(mq), &[b, l, w])?;
    let k = g.index_map(qkv, Arc::new(mk), &[b, l, w])?;
    let v = g.index_map(qkv, Arc::new(mv), &[b, l, w])?;
    Ok((q, k, v))
}

/// [B, L, H*dh] -> [B, H, L, dh]
pub fn split_heads(
    g: &mut Graph,
    x: NodeId,
    b: usize,
    l: usize,
    h: usize,
    dh: usize,
) -> Result<NodeId> {
    let mut map = Vec::with_capacity(b * h * l * dh);
    for bi in 0..b {
        for hi in 0..h {
            for li in 0..l {
                let base = (bi * l + li) * h * dh + hi * dh;
                for di in 0..dh {
                    map.push((base + di) as u32);
                }
            }
        }
    }
    g.index_map(x, Arc::new(map), &[b, h, l, dh])
}

/// [B, H, L, dh] -> [B, L, H*dh]
pub fn merge_heads(
    g: &mut Graph,
    x: NodeId,
    b: usize,
    l: usize,
    h: usize,
    dh: usize,
) -> Result<NodeId> {
    let mut map = Vec::with_capacity(b * l * h * dh);
    for bi in 0..b {
        for li in 0..l {
            for hi in 0..h {
                let base = ((bi * h + hi) * l + li) * dh;
                for di in 0..dh {
                    map.push((base + di) as u32);
                }
            }
        }
    }
    g.index_map(x, Arc::new(map), &[b, l, h * dh])
}

/// Additive logits mask (-1e9 on padded keys) for [B, H, Lq, Lk] attention.
/// `key_mask` is row-major [B, Lk], true = attend.
pub fn key_padding_mask(
    b: usize,
    h: usize,
    lq: usize,
    lk: usize,
    key_mask: &[bool],
) -> Arc<Vec<f32>> {
    debug_assert_eq!(key_mask.len(), b * lk);
    let mut m = Vec::with_capacity(b * h * lq * lk);
    for bi in 0..b {
        let row = &key_mask[bi * lk..(bi + 1) * lk];
        for _ in 0..h * lq {
            for &keep in row {
                m.push(if keep { 0.0 } else { -1e9 });
            }
        }
    }
    Arc::new(m)
}
