//! Tap-site naming: `Stage-Level-Repeat-Block-FeatureType`.
//!
//! `U-L1-R1-B0-Cross-Q` is the query projection of the cross-attention layer
//! in transformer block 0 of the second attention/resnet pair of up-block 1.
//! Resnet outputs carry no transformer block: `U-L2-R2-Res-Out`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureType {
    /// Pixel-wise query projection entering the text cross-attention.
    CrossQ,
    /// Output of the transformer block (after self-, cross-attention and MLP).
    Out,
    /// Output of the resnet block.
    ResOut,
}

/// Parsed identity of a tap point inside the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockAddress {
    pub stage: Stage,
    pub level: u32,
    pub repeat: u32,
    /// Transformer block index; always 0 for `ResOut`.
    pub block: u32,
    pub feature_type: FeatureType,
}

impl BlockAddress {
    pub fn new(stage: Stage, level: u32, repeat: u32, block: u32, feature_type: FeatureType) -> Self {
        let block = if feature_type == FeatureType::ResOut { 0 } else { block };
        Self {
            stage,
            level,
            repeat,
            block,
            feature_type,
        }
    }

    /// The `{D|U}-L#-R#-B#` prefix naming the transformer block (used as the
    /// layer id of its cross-attention map).
    pub fn layer_id(&self) -> String {
        format!(
            "{}-L{}-R{}-B{}",
            self.stage_letter(),
            self.level,
            self.repeat,
            self.block
        )
    }

    fn stage_letter(&self) -> char {
        match self.stage {
            Stage::Down => 'D',
            Stage::Up => 'U',
        }
    }
}

impl fmt::Display for BlockAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.stage_letter();
        match self.feature_type {
            FeatureType::ResOut => write!(f, "{s}-L{}-R{}-Res-Out", self.level, self.repeat),
            FeatureType::CrossQ => write!(
                f,
                "{s}-L{}-R{}-B{}-Cross-Q",
                self.level, self.repeat, self.block
            ),
            FeatureType::Out => write!(f, "{s}-L{}-R{}-B{}-Out", self.level, self.repeat, self.block),
        }
    }
}

fn indexed(input: &str, seg: Option<&str>, prefix: char, name: &'static str) -> Result<u32> {
    let err = |found: &str| Error::AddressParse {
        input: input.to_string(),
        segment: name,
        found: found.to_string(),
    };
    let seg = seg.ok_or_else(|| err("<missing>"))?;
    let mut chars = seg.chars();
    match chars.next() {
        Some(c) if c.eq_ignore_ascii_case(&prefix) => {}
        _ => return Err(err(seg)),
    }
    let digits = chars.as_str();
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err(seg));
    }
    digits.parse().map_err(|_| err(seg))
}

/// Parses an address such as `U-L1-R1-B0-Cross-Q` (case-insensitive).
pub fn parse_block_address(text: &str) -> Result<BlockAddress> {
    let input = text.trim();
    let fail = |segment: &'static str, found: &str| Error::AddressParse {
        input: input.to_string(),
        segment,
        found: found.to_string(),
    };
    if input.is_empty() {
        return Err(fail("stage", "<empty>"));
    }
    let parts: Vec<&str> = input.split('-').collect();
    let stage = match parts[0].to_ascii_uppercase().as_str() {
        "D" => Stage::Down,
        "U" => Stage::Up,
        _ => return Err(fail("stage", parts[0])),
    };
    let level = indexed(input, parts.get(1).copied(), 'L', "level")?;
    let repeat = indexed(input, parts.get(2).copied(), 'R', "repeat")?;

    let rest: Vec<String> = parts[3.min(parts.len())..]
        .iter()
        .map(|p| p.to_ascii_lowercase())
        .collect();
    let rest: Vec<&str> = rest.iter().map(String::as_str).collect();
    match rest.as_slice() {
        ["res", "out"] => Ok(BlockAddress::new(stage, level, repeat, 0, FeatureType::ResOut)),
        [b, tail @ ..] if b.starts_with('b') => {
            let block = indexed(input, Some(parts[3]), 'B', "block")?;
            let ft = match tail {
                ["cross", "q"] => FeatureType::CrossQ,
                ["out"] => FeatureType::Out,
                ["res", "out"] => {
                    return Err(fail("block", parts[3]));
                }
                _ => return Err(fail("feature type", &parts[4.min(parts.len())..].join("-"))),
            };
            Ok(BlockAddress::new(stage, level, repeat, block, ft))
        }
        [] => Err(fail("feature type", "<missing>")),
        _ => Err(fail("feature type", &parts[3..].join("-"))),
    }
}

impl FromStr for BlockAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_block_address(s)
    }
}

impl TryFrom<String> for BlockAddress {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        parse_block_address(&s)
    }
}

impl From<BlockAddress> for String {
    fn from(a: BlockAddress) -> String {
        a.to_string()
    }
}
