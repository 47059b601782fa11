//! Closed attribute vocabulary and referring-expression grammar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLORS: [(&str, [f32; 3]); 10] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.20]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("magenta", [0.90, 0.15, 0.85]),
    ("white", [0.97, 0.97, 0.97]),
    ("orange", [0.98, 0.55, 0.05]),
    ("purple", [0.50, 0.15, 0.65]),
    ("gray", [0.50, 0.50, 0.50]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Motion {
    Static,
    Fast,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

impl SizeClass {
    pub const ALL: [SizeClass; 2] = [SizeClass::Small, SizeClass::Large];
}

impl Motion {
    pub const ALL: [Motion; 2] = [Motion::Static, Motion::Fast];
}

/// Attributes of one object in a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectAttrs {
    pub shape: ShapeKind,
    pub color: u8,
    pub size: SizeClass,
    pub motion: Motion,
}

/// Token ids: colours first, then shapes, sizes and motion tags.
pub const VOCAB_SIZE: usize = 17;
const SHAPE_BASE: u16 = 10;
const SIZE_BASE: u16 = 13;
const MOTION_BASE: u16 = 15;

pub fn color_token(c: u8) -> u16 {
    c as u16
}

pub fn shape_token(s: ShapeKind) -> u16 {
    SHAPE_BASE + ShapeKind::ALL.iter().position(|&k| k == s).unwrap() as u16
}

pub fn size_token(s: SizeClass) -> u16 {
    SIZE_BASE + SizeClass::ALL.iter().position(|&k| k == s).unwrap() as u16
}

pub fn motion_token(m: Motion) -> u16 {
    MOTION_BASE + Motion::ALL.iter().position(|&k| k == m).unwrap() as u16
}

pub fn token_str(t: u16) -> Result<&'static str> {
    const REST: [&str; 7] = ["circle", "square", "triangle", "small", "large", "static", "fast"];
    match t {
        0..=9 => Ok(COLORS[t as usize].0),
        10..=16 => Ok(REST[(t - SHAPE_BASE) as usize]),
        _ => Err(Error::Vocabulary(format!("token id {t} out of range"))),
    }
}

pub fn token_id(word: &str) -> Result<u16> {
    (0..VOCAB_SIZE as u16)
        .find(|&t| token_str(t).ok() == Some(word))
        .ok_or_else(|| Error::Vocabulary(format!("unknown word '{word}'")))
}

pub fn check_tokens(tokens: &[u16]) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
        Some(t) => Err(Error::Vocabulary(format!("token id {t} out of range"))),
        None => Ok(()),
    }
}

pub fn render_label(tokens: &[u16]) -> Result<String> {
    let words = tokens.iter().map(|&t| token_str(t)).collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

/// Which attributes a referring expression mentions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mention {
    pub motion: bool,
    pub size: bool,
}

/// Candidate mentions, shortest first. Colour and shape are always present.
pub const MENTIONS: [Mention; 4] = [
    Mention { motion: false, size: false },
    Mention { motion: false, size: true },
    Mention { motion: true, size: false },
    Mention { motion: true, size: true },
];

/// Tokens in grammatical order: `[motion] [size] color shape`.
pub fn label_tokens(obj: &ObjectAttrs, m: Mention) -> Vec<u16> {
    let mut t = Vec::with_capacity(4);
    if m.motion {
        t.push(motion_token(obj.motion));
    }
    if m.size {
        t.push(size_token(obj.size));
    }
    t.push(color_token(obj.color));
    t.push(shape_token(obj.shape));
    t
}

/// Whether `obj` satisfies every attribute named by `tokens`.
pub fn matches(obj: &ObjectAttrs, tokens: &[u16]) -> bool {
    tokens.iter().all(|&t| match t {
        0..=9 => obj.color as u16 == t,
        10..=12 => shape_token(obj.shape) == t,
        13..=14 => size_token(obj.size) == t,
        15..=16 => motion_token(obj.motion) == t,
        _ => false,
    })
}

/// Whether `tokens` follows the grammar.
pub fn is_grammatical(tokens: &[u16]) -> bool {
    let n = tokens.len();
    if !(2..=4).contains(&n) {
        return false;
    }
    let (head, tail) = tokens.split_at(n - 2);
    if !(tail[0] <= 9 && (10..=12).contains(&tail[1])) {
        return false;
    }
    match head {
        [] => true,
        [a] => (13..=16).contains(a),
        [a, b] => (15..=16).contains(a) && (13..=14).contains(b),
        _ => false,
    }
}

/// Shortest grammatical expression naming `objects[target]` and nothing else.
pub fn minimal_label(objects: &[ObjectAttrs], target: usize) -> Option<Vec<u16>> {
    MENTIONS.iter().find_map(|&m| {
        let tokens = label_tokens(&objects[target], m);
        let hits = objects.iter().filter(|o| matches(o, &tokens)).count();
        (hits == 1).then_some(tokens)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_words() {
        for t in 0..VOCAB_SIZE as u16 {
            assert_eq!(token_id(token_str(t).unwrap()).unwrap(), t);
        }
        assert!(matches!(token_id("banana"), Err(Error::Vocabulary(_))));
        assert!(check_tokens(&[3, 17]).is_err());
    }

    #[test]
    fn grammar() {
        let o = ObjectAttrs {
            shape: ShapeKind::Circle,
            color: 0,
            size: SizeClass::Small,
            motion: Motion::Fast,
        };
        for m in MENTIONS {
            assert!(is_grammatical(&label_tokens(&o, m)));
        }
        let all = label_tokens(&o, MENTIONS[3]);
        assert_eq!(render_label(&all).unwrap(), "fast small red circle");
        assert!(!is_grammatical(&[10, 0]));
        assert!(!is_grammatical(&[13, 15, 0, 10]));
    }

    #[test]
    fn minimal_label_disambiguates() {
        let a = ObjectAttrs {
            shape: ShapeKind::Square,
            color: 2,
            size: SizeClass::Small,
            motion: Motion::Static,
        };
        let b = ObjectAttrs {
            size: SizeClass::Large,
            ..a
        };
        assert_eq!(minimal_label(&[a, b], 0).unwrap(), vec![13, 2, 11]);
        let c = ObjectAttrs { motion: Motion::Fast, ..a };
        assert_eq!(minimal_label(&[a, c], 1).unwrap(), vec![16, 2, 11]);
        assert!(minimal_label(&[a, a], 0).is_none());
    }
}
