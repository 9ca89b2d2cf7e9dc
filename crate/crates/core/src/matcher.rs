//! Candidate sets and referring-expression resolution.
//!
//! Each detection becomes a candidate carrying its instance profile and the
//! top-left corner of its box. Only the profile and that position are ever
//! written into a prompt.

use crate::chat::{bounded_map, ChatBackend, ChatRequest, PromptPair};
use crate::detector::Detection;
use crate::geom::{BoundingBox, RasterMask};
use crate::profile::{tokenize, ObjectProfile};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const MAX_ATTEMPTS: usize = 3;

const POSITION_RULES: &str = "Each item description includes positional information, where the first value \
represents the x-axis (horizontal position) and the second value represents the y-axis (vertical position). \
A higher x-axis value indicates the item is positioned further to the right. \
A higher y-axis value indicates the item is positioned lower.\n\
Once you determine the matches, convert them into the specified output format.";

pub fn joint_system_prompt() -> String {
    format!(
        "You are an expert in information matching. Your task is to match items from a given list of \
descriptions to corresponding inquiries based on relevance. Each inquiry only matches one item description \
and appears once in the final output.\n{POSITION_RULES}"
    )
}

pub fn independent_system_prompt() -> String {
    format!(
        "You are an expert in information matching. Your task is to match items from a given list of \
descriptions to the given inquiry based on relevance. Each inquiry only matches one item description \
and appears once in the final output.\n{POSITION_RULES}"
    )
}

const JOINT_CLOSING: &str =
    "You are given a few inquiries. Please find matched item for each inquiry and list all answers in the given format.";
const INDEPENDENT_CLOSING: &str =
    "You are given an inquiry. Please find the best matched item and output the answer in the given format.";

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("no profile for detected instance {0}")]
    MissingProfile(u32),
    #[error("nothing to match: no expressions")]
    NoExpressions,
    #[error("nothing to match: no candidates")]
    NoCandidates,
    #[error("response is not valid JSON: {0}")]
    Malformed(String),
    #[error("response does not follow the {strategy:?} output shape: {reason}")]
    Shape { strategy: Strategy, reason: String },
    #[error("response names unknown item {0}")]
    UnknownItem(u32),
    #[error("response names unknown inquiry {0}")]
    UnknownInquiry(u32),
    #[error("inquiry {0} appears more than once")]
    DuplicateInquiry(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Joint,
    Independent,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Strategy::Joint),
            "independent" => Ok(Strategy::Independent),
            other => Err(format!("unknown strategy `{other}` (expected joint or independent)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub item_id: u32,
    pub instance_id: u32,
    pub profile: ObjectProfile,
    pub position: (f64, f64),
    pub bbox: BoundingBox,
    pub mask: Option<RasterMask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expression {
    pub expression_id: u32,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchSource {
    Llm,
    Fallback,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub expression_id: u32,
    pub item_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub source: MatchSource,
}

/// One candidate per detection, numbered from 1 in `(x, y)` order of the
/// box's top-left corner.
pub fn build_candidates(
    detections: &[Detection],
    profiles: &BTreeMap<u32, ObjectProfile>,
) -> Result<Vec<Candidate>, MatchError> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| {
        a.bbox
            .x
            .total_cmp(&b.bbox.x)
            .then(a.bbox.y.total_cmp(&b.bbox.y))
            .then(a.proposal_index.cmp(&b.proposal_index))
    });
    order
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let profile = profiles
                .get(&d.instance_id)
                .ok_or(MatchError::MissingProfile(d.instance_id))?;
            Ok(Candidate {
                item_id: i as u32 + 1,
                instance_id: d.instance_id,
                profile: profile.clone(),
                position: d.bbox.top_left(),
                bbox: d.bbox,
                mask: d.mask.clone(),
            })
        })
        .collect()
}

/// Positions are rendered as whole pixels.
fn fmt_coord(v: f64) -> String {
    format!("{}", v.round() as i64)
}

fn render_items(candidates: &[Candidate]) -> String {
    let items: Vec<String> = candidates
        .iter()
        .map(|c| {
            format!(
                "Item ID: {}:\n- Description: {}\n- Position: ({}, {})",
                c.item_id,
                c.profile.to_prompt_json(),
                fmt_coord(c.position.0),
                fmt_coord(c.position.1)
            )
        })
        .collect();
    format!("Items' Description:\n{}", items.join("\n\n"))
}

/// All expressions of a query in one prompt; inquiries are numbered from 1
/// in the order given.
pub fn render_joint_prompt(candidates: &[Candidate], expressions: &[Expression]) -> Result<PromptPair, MatchError> {
    if expressions.is_empty() {
        return Err(MatchError::NoExpressions);
    }
    if candidates.is_empty() {
        return Err(MatchError::NoCandidates);
    }
    let inquiries: Vec<String> = expressions
        .iter()
        .enumerate()
        .map(|(i, e)| format!("Inquiry ID: {}, Inquiry Content: {}", i + 1, e.text))
        .collect();
    Ok(PromptPair {
        system: joint_system_prompt(),
        user: format!(
            "{}\n\nInquiries:\n{}\n\n{JOINT_CLOSING}",
            render_items(candidates),
            inquiries.join("\n")
        ),
        image: None,
    })
}

pub fn render_independent_prompt(candidates: &[Candidate], expression: &Expression) -> Result<PromptPair, MatchError> {
    if candidates.is_empty() {
        return Err(MatchError::NoCandidates);
    }
    if expression.text.trim().is_empty() {
        return Err(MatchError::NoExpressions);
    }
    Ok(PromptPair {
        system: independent_system_prompt(),
        user: format!(
            "{}\n\nInquiry:\n{}\n\n{INDEPENDENT_CLOSING}",
            render_items(candidates),
            expression.text
        ),
        image: None,
    })
}

pub fn joint_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "matches": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {"inquiry_id": {"type": "integer"}, "item_id": {"type": "integer"}},
                    "required": ["inquiry_id", "item_id"]
                }
            }
        },
        "required": ["matches"]
    })
}

pub fn independent_schema() -> Value {
    json!({
        "type": "object",
        "properties": {"item_id": {"type": "integer"}},
        "required": ["item_id"]
    })
}

fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

fn as_id(v: &Value, strategy: Strategy, field: &str) -> Result<u32, MatchError> {
    let shape = |reason: String| MatchError::Shape { strategy, reason };
    match v {
        Value::Number(n) => n
            .as_u64()
            .and_then(|x| u32::try_from(x).ok())
            .ok_or_else(|| shape(format!("`{field}` is not a non-negative integer"))),
        Value::String(s) => s
            .trim()
            .parse()
            .map_err(|_| shape(format!("`{field}` is not an integer"))),
        _ => Err(shape(format!("`{field}` missing or not an integer"))),
    }
}

/// Decode a matching answer into `(inquiry_id, item_id)` pairs.
///
/// Joint answers look like `{"matches": [{"inquiry_id": 1, "item_id": 6}, ...]}`;
/// independent answers are `{"item_id": 7}` and resolve the single entry of
/// `known_inquiries`.
pub fn parse_match_response(
    raw: &str,
    strategy: Strategy,
    known_items: &BTreeSet<u32>,
    known_inquiries: &BTreeSet<u32>,
) -> Result<Vec<(u32, u32)>, MatchError> {
    let v: Value = serde_json::from_str(strip_code_fence(raw)).map_err(|e| MatchError::Malformed(e.to_string()))?;
    let check_item = |id: u32| {
        if known_items.contains(&id) {
            Ok(id)
        } else {
            Err(MatchError::UnknownItem(id))
        }
    };
    match strategy {
        Strategy::Independent => {
            let inquiry = match known_inquiries.iter().collect::<Vec<_>>().as_slice() {
                [only] => **only,
                _ => {
                    return Err(MatchError::Shape {
                        strategy,
                        reason: "independent matching resolves exactly one inquiry".into(),
                    })
                }
            };
            let item = as_id(v.get("item_id").unwrap_or(&Value::Null), strategy, "item_id")?;
            Ok(vec![(inquiry, check_item(item)?)])
        }
        Strategy::Joint => {
            let matches = v.get("matches").and_then(Value::as_array).ok_or_else(|| MatchError::Shape {
                strategy,
                reason: "missing `matches` array".into(),
            })?;
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(matches.len());
            for m in matches {
                let inquiry = as_id(m.get("inquiry_id").unwrap_or(&Value::Null), strategy, "inquiry_id")?;
                let item = as_id(m.get("item_id").unwrap_or(&Value::Null), strategy, "item_id")?;
                if !known_inquiries.contains(&inquiry) {
                    return Err(MatchError::UnknownInquiry(inquiry));
                }
                if !seen.insert(inquiry) {
                    return Err(MatchError::DuplicateInquiry(inquiry));
                }
                out.push((inquiry, check_item(item)?));
            }
            Ok(out)
        }
    }
}

const STOPWORDS: [&str; 16] = [
    "a", "an", "the", "one", "of", "with", "on", "in", "and", "to", "is", "it", "that", "this", "item", "object",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Spatial {
    Leftmost,
    Rightmost,
    Top,
    Bottom,
    Middle,
}

fn spatial_keyword(word: &str) -> Option<Spatial> {
    match word {
        "leftmost" => Some(Spatial::Leftmost),
        "rightmost" => Some(Spatial::Rightmost),
        "top" | "topmost" => Some(Spatial::Top),
        "bottom" | "bottommost" => Some(Spatial::Bottom),
        "middle" | "center" | "centre" => Some(Spatial::Middle),
        _ => None,
    }
}

/// Deterministic resolver: token overlap with each candidate's profile
/// vocabulary, then a spatial keyword (if any) among the best-overlapping
/// candidates. Ties go to the lowest item id.
pub fn heuristic_match(candidates: &[Candidate], expression: &str) -> Option<u32> {
    let words: Vec<String> = tokenize(expression).collect();
    let spatial = words.iter().find_map(|w| spatial_keyword(w));
    let content: BTreeSet<&str> = words
        .iter()
        .map(String::as_str)
        .filter(|w| !STOPWORDS.contains(w) && spatial_keyword(w).is_none())
        .collect();

    let scored: Vec<(usize, &Candidate)> = candidates
        .iter()
        .map(|c| {
            let vocab = c.profile.vocabulary();
            let score = content.iter().filter(|w| vocab.binary_search_by(|v| v.as_str().cmp(w)).is_ok()).count();
            (score, c)
        })
        .collect();
    let best = scored.iter().map(|(s, _)| *s).max()?;
    let mut pool: Vec<&Candidate> = scored.iter().filter(|(s, _)| *s == best).map(|(_, c)| *c).collect();
    pool.sort_by_key(|c| c.item_id);

    let key_x = |c: &&Candidate| c.position.0;
    let key_y = |c: &&Candidate| c.position.1;
    // min_by/max_by keep the first (lowest item id) on ties only for min_by;
    // for maxima, iterate in reverse id order to get the same rule
    let pick = match spatial {
        None => pool.first().copied(),
        Some(Spatial::Leftmost) => pool.iter().copied().min_by(|a, b| key_x(a).total_cmp(&key_x(b))),
        Some(Spatial::Top) => pool.iter().copied().min_by(|a, b| key_y(a).total_cmp(&key_y(b))),
        Some(Spatial::Rightmost) => pool.iter().rev().copied().max_by(|a, b| key_x(a).total_cmp(&key_x(b))),
        Some(Spatial::Bottom) => pool.iter().rev().copied().max_by(|a, b| key_y(a).total_cmp(&key_y(b))),
        Some(Spatial::Middle) => {
            let mut by_x = pool.clone();
            by_x.sort_by(|a, b| key_x(a).total_cmp(&key_x(b)).then(a.item_id.cmp(&b.item_id)));
            by_x.get((by_x.len() - 1) / 2).copied()
        }
    };
    pick.map(|c| c.item_id)
}

/// How expressions get resolved.
pub enum Resolver<'a> {
    /// Heuristic answers only, no backend.
    Heuristic,
    Llm {
        backend: &'a dyn ChatBackend,
        model: String,
        max_inflight: usize,
    },
}

/// Filesystem-safe label for a query image, used to key recorded answers.
pub fn fixture_key(query: &str) -> String {
    query
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn result_for(candidates: &[Candidate], expression_id: u32, item_id: u32, source: MatchSource) -> MatchResult {
    let c = candidates
        .iter()
        .find(|c| c.item_id == item_id)
        .expect("item ids are validated against the candidate set");
    MatchResult {
        expression_id,
        item_id,
        bbox: c.bbox,
        source,
    }
}

fn fallback(candidates: &[Candidate], e: &Expression, source: MatchSource) -> MatchResult {
    let item = heuristic_match(candidates, &e.text).expect("candidate set is non-empty");
    result_for(candidates, e.expression_id, item, source)
}

fn ask(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    strategy: Strategy,
    items: &BTreeSet<u32>,
    inquiries: &BTreeSet<u32>,
) -> Option<Vec<(u32, u32)>> {
    for attempt in 1..=MAX_ATTEMPTS {
        let outcome = backend
            .complete(request)
            .map_err(|e| e.to_string())
            .and_then(|raw| parse_match_response(&raw, strategy, items, inquiries).map_err(|e| e.to_string()));
        match outcome {
            Ok(pairs) => return Some(pairs),
            Err(e) => log::warn!("{}: attempt {attempt} failed: {e}", request.key),
        }
    }
    None
}

/// Resolve every expression of one query with a single prompt. Expressions
/// the answer leaves out (or all of them, if every attempt fails) fall back
/// to [`heuristic_match`].
pub fn match_joint(
    query: &str,
    candidates: &[Candidate],
    expressions: &[Expression],
    resolver: &Resolver<'_>,
) -> Result<Vec<MatchResult>, MatchError> {
    let prompt = render_joint_prompt(candidates, expressions)?;
    let (backend, model) = match resolver {
        Resolver::Heuristic => {
            return Ok(expressions.iter().map(|e| fallback(candidates, e, MatchSource::Heuristic)).collect())
        }
        Resolver::Llm { backend, model, .. } => (*backend, model),
    };
    let request = ChatRequest {
        model: model.clone(),
        prompt,
        schema_name: "joint_matches".into(),
        schema: joint_schema(),
        key: format!("{}__joint", fixture_key(query)),
    };
    let items: BTreeSet<u32> = candidates.iter().map(|c| c.item_id).collect();
    let inquiries: BTreeSet<u32> = (1..=expressions.len() as u32).collect();
    let answer: BTreeMap<u32, u32> = ask(backend, &request, Strategy::Joint, &items, &inquiries)
        .unwrap_or_default()
        .into_iter()
        .collect();
    Ok(expressions
        .iter()
        .enumerate()
        .map(|(i, e)| match answer.get(&(i as u32 + 1)) {
            Some(&item) => result_for(candidates, e.expression_id, item, MatchSource::Llm),
            None => fallback(candidates, e, MatchSource::Fallback),
        })
        .collect())
}

/// One prompt per expression; a failure only affects its own expression.
pub fn match_independent(
    query: &str,
    candidates: &[Candidate],
    expressions: &[Expression],
    resolver: &Resolver<'_>,
) -> Result<Vec<MatchResult>, MatchError> {
    if expressions.is_empty() {
        return Err(MatchError::NoExpressions);
    }
    let prompts = expressions
        .iter()
        .map(|e| render_independent_prompt(candidates, e))
        .collect::<Result<Vec<_>, _>>()?;
    let (backend, model, max_inflight) = match resolver {
        Resolver::Heuristic => {
            return Ok(expressions.iter().map(|e| fallback(candidates, e, MatchSource::Heuristic)).collect())
        }
        Resolver::Llm {
            backend,
            model,
            max_inflight,
        } => (*backend, model, *max_inflight),
    };
    let items: BTreeSet<u32> = candidates.iter().map(|c| c.item_id).collect();
    let jobs: Vec<(&Expression, PromptPair)> = expressions.iter().zip(prompts).collect();
    Ok(bounded_map(&jobs, max_inflight, |(e, prompt)| {
        let request = ChatRequest {
            model: model.clone(),
            prompt: prompt.clone(),
            schema_name: "independent_match".into(),
            schema: independent_schema(),
            key: format!("{}__expr{}", fixture_key(query), e.expression_id),
        };
        let inquiry: BTreeSet<u32> = [e.expression_id].into();
        match ask(backend, &request, Strategy::Independent, &items, &inquiry) {
            Some(pairs) => result_for(candidates, e.expression_id, pairs[0].1, MatchSource::Llm),
            None => fallback(candidates, e, MatchSource::Fallback),
        }
    }))
}

pub fn match_expressions(
    strategy: Strategy,
    query: &str,
    candidates: &[Candidate],
    expressions: &[Expression],
    resolver: &Resolver<'_>,
) -> Result<Vec<MatchResult>, MatchError> {
    match strategy {
        Strategy::Joint => match_joint(query, candidates, expressions, resolver),
        Strategy::Independent => match_independent(query, candidates, expressions, resolver),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::BackendError;
    use crate::profile::{ColorEntry, TextEntry};

    fn profile(id: &str, shape: &str, color: &str, text: &str) -> ObjectProfile {
        ObjectProfile::new(
            id,
            shape,
            vec![ColorEntry {
                description: "main color".into(),
                color: color.into(),
            }],
            vec![TextEntry::new(text, "front", None)],
            "f",
            format!("A {color} {shape}."),
        )
    }

    fn cand(item: u32, x: f64, y: f64, p: ObjectProfile) -> Candidate {
        Candidate {
            item_id: item,
            instance_id: item,
            profile: p,
            position: (x, y),
            bbox: BoundingBox::new(x, y, 10.0, 10.0).unwrap(),
            mask: None,
        }
    }

    fn det(id: u32, x: f64, y: f64, idx: usize) -> Detection {
        Detection {
            instance_id: id,
            bbox: BoundingBox::new(x, y, 120.0, 300.0).unwrap(),
            similarity: 0.9,
            best_view: 1,
            proposal_index: idx,
            objectness: 1.0,
            mask: None,
        }
    }

    #[test]
    fn candidates_use_top_left_and_sorted_ids() {
        let profiles: BTreeMap<u32, ObjectProfile> = [(5, profile("005", "bottle", "red", "x"))].into();
        let c = build_candidates(&[det(5, 438.0, 346.0, 0)], &profiles).unwrap();
        assert_eq!(c[0].position, (438.0, 346.0));
        assert!(build_candidates(&[], &profiles).unwrap().is_empty());

        let c = build_candidates(&[det(5, 300.0, 10.0, 0), det(5, 100.0, 50.0, 1)], &profiles).unwrap();
        assert_eq!(c.iter().map(|c| c.item_id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(c[0].position.0, 100.0);
        assert_eq!(c[0].profile, c[1].profile);

        assert_eq!(
            build_candidates(&[det(9, 0.0, 0.0, 0)], &profiles),
            Err(MatchError::MissingProfile(9))
        );
    }

    #[test]
    fn prompts_only_carry_positions() {
        let c = vec![cand(1, 12.0, 34.0, profile("001", "box", "red", "ACME"))];
        let e = vec![Expression {
            expression_id: 4,
            text: "the red box".into(),
        }];
        let p = render_joint_prompt(&c, &e).unwrap();
        assert!(p.user.contains("- Position: (12, 34)"));
        assert!(!p.user.contains("10, 10"));
        assert_eq!(p.user.matches("Item ID:").count(), 1);
        assert_eq!(p.user.matches("Inquiry ID:").count(), 1);
        assert!(matches!(render_joint_prompt(&c, &[]), Err(MatchError::NoExpressions)));
        assert!(matches!(render_independent_prompt(&[], &e[0]), Err(MatchError::NoCandidates)));
    }

    #[test]
    fn parse_joint_and_independent() {
        let items: BTreeSet<u32> = [5, 6, 7].into();
        let inq: BTreeSet<u32> = [1, 2, 3].into();
        let raw = r#"{"matches":[{"inquiry_id":1,"item_id":6},{"inquiry_id":2,"item_id":5},{"inquiry_id":3,"item_id":7}]}"#;
        assert_eq!(
            parse_match_response(raw, Strategy::Joint, &items, &inq).unwrap(),
            vec![(1, 6), (2, 5), (3, 7)]
        );
        let single: BTreeSet<u32> = [2].into();
        assert_eq!(
            parse_match_response(r#"{"item_id": 7}"#, Strategy::Independent, &items, &single).unwrap(),
            vec![(2, 7)]
        );
        assert_eq!(
            parse_match_response("```json\n{\"item_id\": \"6\"}\n```", Strategy::Independent, &items, &single).unwrap(),
            vec![(2, 6)]
        );
    }

    #[test]
    fn parse_errors_are_distinguishable() {
        let items: BTreeSet<u32> = [1, 2].into();
        let inq: BTreeSet<u32> = [1, 2].into();
        let dup = r#"{"matches":[{"inquiry_id":1,"item_id":1},{"inquiry_id":1,"item_id":2}]}"#;
        assert_eq!(
            parse_match_response(dup, Strategy::Joint, &items, &inq),
            Err(MatchError::DuplicateInquiry(1))
        );
        assert!(matches!(
            parse_match_response("nope", Strategy::Joint, &items, &inq),
            Err(MatchError::Malformed(_))
        ));
        assert_eq!(
            parse_match_response(r#"{"matches":[{"inquiry_id":1,"item_id":9}]}"#, Strategy::Joint, &items, &inq),
            Err(MatchError::UnknownItem(9))
        );
        assert_eq!(
            parse_match_response(r#"{"matches":[{"inquiry_id":8,"item_id":1}]}"#, Strategy::Joint, &items, &inq),
            Err(MatchError::UnknownInquiry(8))
        );
        assert!(matches!(
            parse_match_response(r#"{"item": 1}"#, Strategy::Independent, &items, &[1].into()),
            Err(MatchError::Shape { .. })
        ));
    }

    #[test]
    fn heuristic_rules() {
        let c = vec![
            cand(1, 327.0, 193.0, profile("a", "bottle", "orange", "FANTA")),
            cand(2, 438.0, 346.0, profile("b", "bottle", "red", "PEPPER")),
            cand(3, 650.0, 316.0, profile("c", "can", "blue", "ADE")),
        ];
        assert_eq!(heuristic_match(&c, "the orange bottle"), Some(1));
        assert_eq!(heuristic_match(&c, "the leftmost bottle"), Some(1));
        assert_eq!(heuristic_match(&c, "the rightmost bottle"), Some(2));
        assert_eq!(heuristic_match(&c, "the middle one"), Some(2));
        assert_eq!(heuristic_match(&c, "the top one"), Some(1));
        assert_eq!(heuristic_match(&c, "the bottom one"), Some(2));
        assert_eq!(heuristic_match(&c, "something else entirely"), Some(1));
        assert_eq!(heuristic_match(&c[2..], "the orange bottle"), Some(3));
        assert_eq!(heuristic_match(&[], "x"), None);
    }

    struct Failing;

    impl ChatBackend for Failing {
        fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
            Err(BackendError::Transport("down".into()))
        }
    }

    #[test]
    fn backend_failure_falls_back() {
        let c = vec![
            cand(1, 10.0, 10.0, profile("a", "box", "red", "X")),
            cand(2, 90.0, 10.0, profile("b", "box", "blue", "Y")),
        ];
        let e = vec![Expression {
            expression_id: 3,
            text: "the blue box".into(),
        }];
        let r = Resolver::Llm {
            backend: &Failing,
            model: "m".into(),
            max_inflight: 2,
        };
        for s in [Strategy::Joint, Strategy::Independent] {
            let out = match_expressions(s, "q/1.png", &c, &e, &r).unwrap();
            assert_eq!(out[0].item_id, 2);
            assert_eq!(out[0].source, MatchSource::Fallback);
            assert_eq!(out[0].bbox, c[1].bbox);
        }
    }
}
