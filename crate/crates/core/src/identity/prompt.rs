//! Closed-vocabulary prompt grammar:
//!
//! ```text
//! prompt     := identity "," action "," background
//! identity   := COLOR SHAPE "person"
//! action     := "walks" ("left" | "right" | "up") | "bounces" | "spins" | "stays" "still"
//! background := "on" ("grid" | "stripes" | "plain")
//! ```

use std::fmt;

use crate::error::{Error, Result};

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "orange", "purple", "cyan", "magenta",
];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const BACKGROUNDS: [&str; 3] = ["grid", "stripes", "plain"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    WalkLeft,
    WalkRight,
    WalkUp,
    Bounce,
    Spin,
    Stay,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::WalkLeft,
        Action::WalkRight,
        Action::WalkUp,
        Action::Bounce,
        Action::Spin,
        Action::Stay,
    ];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Action::WalkLeft => &["walks", "left"],
            Action::WalkRight => &["walks", "right"],
            Action::WalkUp => &["walks", "up"],
            Action::Bounce => &["bounces"],
            Action::Spin => &["spins"],
            Action::Stay => &["stays", "still"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::WalkLeft => "walk_left",
            Action::WalkRight => "walk_right",
            Action::WalkUp => "walk_up",
            Action::Bounce => "bounce",
            Action::Spin => "spin",
            Action::Stay => "stay",
        }
    }

    pub fn from_name(s: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Translations and bounces; spinning moves texture but not the body.
    pub fn is_locomotion(self) -> bool {
        matches!(
            self,
            Action::WalkLeft | Action::WalkRight | Action::WalkUp | Action::Bounce
        )
    }
}

/// Every word the grammar can emit, in token-id order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec![","];
    v.extend(COLORS);
    v.extend(SHAPES);
    v.push("person");
    v.extend(["walks", "left", "right", "up", "bounces", "spins", "stays", "still"]);
    v.push("on");
    v.extend(BACKGROUNDS);
    v
}

pub fn vocab_size() -> usize {
    vocabulary().len()
}

pub fn token_id(word: &str) -> Option<usize> {
    vocabulary().iter().position(|w| *w == word)
}

pub fn word(id: usize) -> Option<&'static str> {
    vocabulary().get(id).copied()
}

pub const SEPARATOR: usize = 0;

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            token_id(w).ok_or_else(|| Error::Parse {
                position: i,
                message: format!("unknown word {w:?}"),
            })
        })
        .collect()
}

pub fn detokenize(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| word(t).unwrap_or("<?>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Structured form of a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub color: usize,
    pub shape: usize,
    pub action: Action,
    pub background: usize,
}

impl PromptSpec {
    pub fn identity_words(&self) -> Vec<&'static str> {
        vec![COLORS[self.color], SHAPES[self.shape], "person"]
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut words = self.identity_words();
        words.push(",");
        words.extend(self.action.words());
        words.push(",");
        words.extend(["on", BACKGROUNDS[self.background]]);
        words.iter().map(|w| token_id(w).expect("grammar word")).collect()
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&detokenize(&self.tokens()))
    }
}

fn parse_err(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

/// Validates a token sequence against the grammar.
pub fn parse(tokens: &[usize]) -> Result<PromptSpec> {
    let w = |i: usize| tokens.get(i).and_then(|&t| word(t));
    let expect_end = |i: usize, what: &str| -> Result<&'static str> {
        w(i).ok_or_else(|| parse_err(i, format!("expected {what}, prompt ended")))
    };

    let c = expect_end(0, "a color")?;
    let color = COLORS
        .iter()
        .position(|x| *x == c)
        .ok_or_else(|| parse_err(0, format!("expected a color, got {c:?}")))?;
    let s = expect_end(1, "a shape")?;
    let shape = SHAPES
        .iter()
        .position(|x| *x == s)
        .ok_or_else(|| parse_err(1, format!("expected a shape, got {s:?}")))?;
    if expect_end(2, "\"person\"")? != "person" {
        return Err(parse_err(2, "identity phrase must end with \"person\""));
    }
    if expect_end(3, "\",\"")? != "," {
        return Err(parse_err(3, "expected \",\" after the identity phrase"));
    }

    let mut i = 4;
    let first = expect_end(i, "an action")?;
    if first == "," {
        return Err(parse_err(i, "empty action clause"));
    }
    let action = Action::ALL
        .into_iter()
        .find(|a| {
            let ws = a.words();
            ws.iter().enumerate().all(|(k, x)| w(i + k) == Some(*x))
        })
        .ok_or_else(|| parse_err(i, format!("unknown action starting with {first:?}")))?;
    i += action.words().len();
    if expect_end(i, "\",\"")? != "," {
        return Err(parse_err(i, "expected \",\" after the action phrase"));
    }
    i += 1;
    if expect_end(i, "\"on\"")? != "on" {
        return Err(parse_err(i, "background clause must start with \"on\""));
    }
    i += 1;
    let b = expect_end(i, "a background")?;
    let background = BACKGROUNDS
        .iter()
        .position(|x| *x == b)
        .ok_or_else(|| parse_err(i, format!("unknown background {b:?}")))?;
    i += 1;
    if i != tokens.len() {
        return Err(parse_err(i, "trailing tokens after the background"));
    }
    Ok(PromptSpec {
        color,
        shape,
        action,
        background,
    })
}

/// Splits a prompt into its identity clause and the remaining context
/// (action and background, separators included).
pub fn decompose_prompt(tokens: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    parse(tokens)?;
    let cut = tokens
        .iter()
        .position(|&t| t == SEPARATOR)
        .expect("parsed prompt has a separator");
    Ok((tokens[..cut].to_vec(), tokens[cut + 1..].to_vec()))
}

/// Inverse of [`decompose_prompt`].
pub fn rejoin(identity: &[usize], context: &[usize]) -> Vec<usize> {
    let mut out = identity.to_vec();
    out.push(SEPARATOR);
    out.extend_from_slice(context);
    out
}

/// Full prompt and its identity phrase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub y_user: Vec<usize>,
    pub y_identity: Vec<usize>,
}

impl PromptBundle {
    pub fn from_tokens(tokens: Vec<usize>) -> Result<Self> {
        let (identity, _) = decompose_prompt(&tokens)?;
        Ok(PromptBundle {
            y_user: tokens,
            y_identity: identity,
        })
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        Self::from_tokens(tokenize(text)?)
    }

    pub fn text(&self) -> String {
        detokenize(&self.y_user)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_is_first_clause() {
        let toks = tokenize("red square person , walks right , on grid").unwrap();
        let (id, ctx) = decompose_prompt(&toks).unwrap();
        assert_eq!(detokenize(&id), "red square person");
        assert_eq!(detokenize(&ctx), "walks right , on grid");
    }

    #[test]
    fn empty_action_is_a_parse_error() {
        let toks = tokenize("red square person , , on grid").unwrap();
        match decompose_prompt(&toks) {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_report_positions() {
        let pos = |s: &str| match tokenize(s).and_then(|t| parse(&t)) {
            Err(Error::Parse { position, .. }) => position,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(pos("red square dog"), 2);
        assert_eq!(pos("square red person , spins , on grid"), 0);
        assert_eq!(pos("red square person , walks down , on grid"), 5);
        assert_eq!(pos("red square person , walks still , on grid"), 4);
        assert_eq!(pos("red square person , spins , on grid grid"), 8);
        assert_eq!(pos("red square person , spins on grid"), 5);
    }

    #[test]
    fn vocabulary_is_unique() {
        let v = vocabulary();
        let mut sorted = v.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), v.len());
        assert_eq!(token_id(","), Some(SEPARATOR));
    }

    proptest! {
        #[test]
        fn generated_prompts_round_trip(c in 0usize..8, s in 0usize..3, a in 0usize..6, b in 0usize..3) {
            let spec = PromptSpec { color: c, shape: s, action: Action::ALL[a], background: b };
            let toks = spec.tokens();
            prop_assert_eq!(parse(&toks).unwrap(), spec.clone());
            let (id, ctx) = decompose_prompt(&toks).unwrap();
            prop_assert_eq!(rejoin(&id, &ctx), toks.clone());
            prop_assert_eq!(tokenize(&spec.to_string()).unwrap(), toks);
        }
    }
}
