//! Turning raw model text into comparable answers.
//!
//! Extraction is a total function: any input, however malformed, produces an
//! [`AnswerKey`]. Inputs that yield no usable answer come back with
//! `parse_failed` set and a canonical form that matches nothing, so a batch
//! of garbage can never accidentally vote itself into a majority.
//!
//! Normalization maps surface forms to exact values. Integers, decimals,
//! `a/b` fractions, and `\frac{a}{b}` all normalize to reduced rationals, so
//! `1/2`, `0.5`, and `\frac{1}{2}` are one answer. Everything else becomes a
//! case-normalized trimmed string.

use crate::domain::{AnswerKey, Canonical, TaskKind};

/// How to locate the answer within generated text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractionRule {
    /// The payload of the last balanced `\boxed{...}` marker.
    BoxedMarker,
    /// The last nonempty line.
    FinalLine,
    /// The entire trimmed text.
    WholeText,
}

/// The extraction rule each task kind uses.
pub fn rule_for_kind(kind: TaskKind) -> ExtractionRule {
    match kind {
        TaskKind::Math => ExtractionRule::BoxedMarker,
        TaskKind::Code => ExtractionRule::WholeText,
        TaskKind::OpenEnded => ExtractionRule::WholeText,
        TaskKind::DecisionStep => ExtractionRule::FinalLine,
    }
}

/// Extracts an answer from `text` under `rule`. Never panics and never
/// fails; unusable input produces a failed key.
pub fn extract_answer(text: &str, rule: ExtractionRule) -> AnswerKey {
    match rule {
        ExtractionRule::BoxedMarker => match innermost_boxed_payload(text) {
            Some(payload) => normalize(payload),
            None => AnswerKey::failed(""),
        },
        ExtractionRule::FinalLine => {
            match text.lines().rev().find(|line| !line.trim().is_empty()) {
                Some(line) => normalize(line),
                None => AnswerKey::failed(""),
            }
        }
        ExtractionRule::WholeText => {
            let trimmed = text.trim();
            if trimmed.is_empty() {
                AnswerKey::failed("")
            } else {
                normalize(trimmed)
            }
        }
    }
}

/// Normalizes a surface form to its canonical comparable value.
pub fn normalize(raw: &str) -> AnswerKey {
    let mut surface = raw.trim();
    // Outer math delimiters can nest one inside another; peel until stable.
    loop {
        let peeled = strip_outer_delimiters(surface);
        if peeled == surface {
            break;
        }
        surface = peeled;
    }
    if surface.is_empty() {
        return AnswerKey::failed(raw);
    }
    if let Some((num, den)) = parse_rational(surface) {
        return AnswerKey::rational(raw, num, den);
    }
    AnswerKey::text(raw, surface.to_lowercase())
}

/// True when both keys parsed and normalize to the same canonical value.
/// Failed keys are equivalent to nothing, including themselves.
pub fn answers_equivalent(a: &AnswerKey, b: &AnswerKey) -> bool {
    !a.parse_failed && !b.parse_failed && a.canonical == b.canonical
}

/// A canonical value rendered back to a surface form that re-normalizes to
/// itself.
pub fn canonical_surface(canonical: &Canonical) -> String {
    match canonical {
        Canonical::Rational { num, den } if *den == 1 => num.to_string(),
        Canonical::Rational { num, den } => format!("{num}/{den}"),
        Canonical::Text(text) => text.clone(),
        Canonical::Failed(_) => String::new(),
    }
}

/// Pulls the program out of generated text: the first fenced code block when
/// one is present (preferring a fence tagged as Python), the trimmed text
/// otherwise.
pub fn extract_code_block(text: &str) -> String {
    let blocks = fenced_blocks(text);
    if let Some(body) = blocks
        .iter()
        .find(|(info, _)| info.to_lowercase().contains("python"))
        .map(|(_, body)| body)
    {
        return body.clone();
    }
    if let Some((_, body)) = blocks.first() {
        return body.clone();
    }
    text.trim().to_string()
}

fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks = Vec::new();
    let mut info: Option<String> = None;
    let mut body: Vec<&str> = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("```") {
            match info.take() {
                Some(tag) => {
                    blocks.push((tag, body.join("\n")));
                    body.clear();
                }
                None => info = Some(rest.trim().to_string()),
            }
        } else if info.is_some() {
            body.push(line);
        }
    }
    blocks
}

/// Finds the payload of the last `\boxed{...}` marker, recursing into nested
/// markers so `\boxed{\boxed{x}}` yields `x`. Returns `None` when no marker
/// exists or its braces never balance.
pub fn innermost_boxed_payload(text: &str) -> Option<&str> {
    const MARKER: &str = "\\boxed{";
    let start = text.rfind(MARKER)? + MARKER.len();
    let payload = balanced_payload(&text[start..])?;
    match innermost_boxed_payload(payload) {
        Some(inner) => Some(inner),
        None => Some(payload),
    }
}

/// Scans from just past an opening brace, returning the text up to its
/// balancing close. Escaped braces (`\{`, `\}`) do not count toward depth.
fn balanced_payload(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut depth = 1usize;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 1,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[..i]);
                }
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// Strips one layer of surrounding math delimiters, returning the input
/// unchanged when none apply.
fn strip_outer_delimiters(s: &str) -> &str {
    const PAIRS: &[(&str, &str)] = &[
        ("$$", "$$"),
        ("$", "$"),
        ("\\(", "\\)"),
        ("\\[", "\\]"),
    ];
    for (open, close) in PAIRS {
        if s.len() > open.len() + close.len() && s.starts_with(open) && s.ends_with(close) {
            return s[open.len()..s.len() - close.len()].trim();
        }
    }
    s
}

/// Parses an exact rational from one of the accepted numeric surface forms.
fn parse_rational(s: &str) -> Option<(i128, i128)> {
    if let Some(v) = parse_signed_integer(s) {
        return Some((v, 1));
    }
    if let Some(pair) = parse_decimal(s) {
        return Some(reduce(pair.0, pair.1)?);
    }
    if let Some(pair) = parse_slash_fraction(s) {
        return Some(reduce(pair.0, pair.1)?);
    }
    if let Some(pair) = parse_latex_fraction(s) {
        return Some(reduce(pair.0, pair.1)?);
    }
    None
}

fn parse_signed_integer(s: &str) -> Option<i128> {
    let (negative, digits) = split_sign(s)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let v: i128 = digits.parse().ok()?;
    Some(if negative { -v } else { v })
}

fn parse_decimal(s: &str) -> Option<(i128, i128)> {
    let (negative, rest) = split_sign(s)?;
    let (int_part, frac_part) = rest.split_once('.')?;
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let den = 10i128.checked_pow(u32::try_from(frac_part.len()).ok()?)?;
    let int_value: i128 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
    let frac_value: i128 = if frac_part.is_empty() { 0 } else { frac_part.parse().ok()? };
    let num = int_value.checked_mul(den)?.checked_add(frac_value)?;
    Some((if negative { -num } else { num }, den))
}

fn parse_slash_fraction(s: &str) -> Option<(i128, i128)> {
    let (num_part, den_part) = s.split_once('/')?;
    let num = parse_signed_integer(num_part.trim())?;
    let den = parse_signed_integer(den_part.trim())?;
    Some((num, den))
}

fn parse_latex_fraction(s: &str) -> Option<(i128, i128)> {
    let (negative, rest) = split_sign(s)?;
    let rest = ["\\frac", "\\dfrac", "\\tfrac"]
        .iter()
        .find_map(|cmd| rest.strip_prefix(cmd))?;
    let rest = rest.trim_start();
    let rest = rest.strip_prefix('{')?;
    let num_text = balanced_payload(rest)?;
    let rest = rest[num_text.len() + 1..].trim_start();
    let rest = rest.strip_prefix('{')?;
    let den_text = balanced_payload(rest)?;
    if !rest[den_text.len() + 1..].trim().is_empty() {
        return None;
    }
    let num = parse_signed_integer(num_text.trim())?;
    let den = parse_signed_integer(den_text.trim())?;
    Some((if negative { -num } else { num }, den))
}

fn split_sign(s: &str) -> Option<(bool, &str)> {
    if let Some(rest) = s.strip_prefix('-') {
        Some((true, rest))
    } else if let Some(rest) = s.strip_prefix('+') {
        Some((false, rest))
    } else {
        Some((false, s))
    }
}

/// Reduces to lowest terms with a positive denominator. A zero denominator
/// has no rational value.
fn reduce(num: i128, den: i128) -> Option<(i128, i128)> {
    if den == 0 {
        return None;
    }
    let (num, den) = if den < 0 { (num.checked_neg()?, den.checked_neg()?) } else { (num, den) };
    let g = gcd(num.unsigned_abs(), den.unsigned_abs());
    Some((num / g as i128, den / g as i128))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}
