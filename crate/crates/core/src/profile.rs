//! Structured object profiles and their tolerant JSON schema.
//!
//! Two response layouts are in circulation: one names the object under
//! `"name"` and folds the text color into `"position"` (`"on the label, red"`),
//! the other uses `"filename"` and a separate `"color"` key. Both parse into the
//! same [`ObjectProfile`]; the original layout is remembered so the profile
//! serializes back byte-for-byte in the form it was read.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::io;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("profile must be a JSON object")]
    NotAnObject,
    #[error("profile field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("profile has no identifier (`name` or `filename`)")]
    MissingIdentifier,
    #[error("profile identifiers disagree: name `{name}` vs filename `{filename}`")]
    ConflictingIdentifier { name: String, filename: String },
}

fn field_err(field: &str, reason: impl Into<String>) -> ProfileError {
    ProfileError::Field {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorEntry {
    pub description: String,
    pub color: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEntry {
    pub text: String,
    pub position: String,
    pub color: Option<String>,
    /// Color was read from a trailing `", <color>"` inside `position`.
    #[serde(skip)]
    inline_color: bool,
}

impl PartialEq for TextEntry {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text && self.position == other.position && self.color == other.color
    }
}

impl TextEntry {
    pub fn new(text: impl Into<String>, position: impl Into<String>, color: Option<String>) -> Self {
        Self {
            text: text.into(),
            position: position.into(),
            color,
            inline_color: false,
        }
    }

    /// Position string with the color folded back in (`"on the label, red"`).
    pub fn with_inline_color(mut self) -> Self {
        self.inline_color = self.color.is_some();
        self
    }
}

const KNOWN_KEYS: [&str; 7] = [
    "shape", "colors", "texts", "name", "filename", "function", "summary",
];

/// How a profile was laid out on disk; ignored by equality.
#[derive(Debug, Clone)]
struct Layout {
    key_order: Vec<String>,
    identifier_key: &'static str,
    texts_none: bool,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            key_order: ["shape", "colors", "texts", "name", "function", "summary"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            identifier_key: "name",
            texts_none: false,
        }
    }
}

/// Structured description of one reference instance.
#[derive(Debug, Clone)]
pub struct ObjectProfile {
    pub identifier: String,
    pub shape: String,
    pub colors: Vec<ColorEntry>,
    pub texts: Vec<TextEntry>,
    pub function: String,
    pub summary: String,
    /// Unrecognised top-level keys, kept verbatim.
    pub extra: Map<String, Value>,
    layout: Layout,
}

impl PartialEq for ObjectProfile {
    fn eq(&self, other: &Self) -> bool {
        self.identifier == other.identifier
            && self.shape == other.shape
            && self.colors == other.colors
            && self.texts == other.texts
            && self.function == other.function
            && self.summary == other.summary
            && self.extra == other.extra
    }
}

impl ObjectProfile {
    pub fn new(
        identifier: impl Into<String>,
        shape: impl Into<String>,
        colors: Vec<ColorEntry>,
        texts: Vec<TextEntry>,
        function: impl Into<String>,
        summary: impl Into<String>,
    ) -> Self {
        Self {
            identifier: identifier.into(),
            shape: shape.into(),
            colors,
            texts,
            function: function.into(),
            summary: summary.into(),
            extra: Map::new(),
            layout: Layout::default(),
        }
    }

    /// Key under which the identifier is written (`name` or `filename`).
    pub fn identifier_key(&self) -> &'static str {
        self.layout.identifier_key
    }

    /// Rebuild the JSON object in its original key order.
    pub fn to_value(&self) -> Value {
        let mut out = Map::new();
        let mut order: Vec<&str> = self.layout.key_order.iter().map(String::as_str).collect();
        for key in ["shape", "colors", "texts", self.layout.identifier_key, "function", "summary"] {
            if !order.contains(&key) {
                order.push(key);
            }
        }
        for key in self.extra.keys() {
            if !order.contains(&key.as_str()) {
                order.push(key);
            }
        }
        for key in order {
            let value = match key {
                "shape" => Value::String(self.shape.clone()),
                "colors" => Value::Array(
                    self.colors
                        .iter()
                        .map(|c| {
                            let mut m = Map::new();
                            m.insert("description".into(), c.description.clone().into());
                            m.insert("color".into(), c.color.clone().into());
                            Value::Object(m)
                        })
                        .collect(),
                ),
                "texts" if self.texts.is_empty() && self.layout.texts_none => "None".into(),
                "texts" => Value::Array(self.texts.iter().map(text_to_value).collect()),
                "function" => Value::String(self.function.clone()),
                "summary" => Value::String(self.summary.clone()),
                k if k == self.layout.identifier_key => Value::String(self.identifier.clone()),
                k => match self.extra.get(k) {
                    Some(v) => v.clone(),
                    None => continue,
                },
            };
            out.insert(key.to_string(), value);
        }
        Value::Object(out)
    }

    /// Single-line rendering with `", "` / `": "` separators and ASCII-only
    /// escapes, the form used inside matching prompts.
    pub fn to_prompt_json(&self) -> String {
        to_spaced_json(&self.to_value())
    }

    /// Lower-cased words drawn from shape, colors, texts and summary.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words = Vec::new();
        let mut push = |s: &str| words.extend(tokenize(s));
        push(&self.shape);
        for c in &self.colors {
            push(&c.color);
        }
        for t in &self.texts {
            push(&t.text);
        }
        push(&self.summary);
        words.sort();
        words.dedup();
        words
    }
}

fn text_to_value(t: &TextEntry) -> Value {
    let mut m = Map::new();
    m.insert("text".into(), t.text.clone().into());
    match (&t.color, t.inline_color) {
        (Some(c), true) => {
            m.insert("position".into(), format!("{}, {}", t.position, c).into());
        }
        (Some(c), false) => {
            m.insert("position".into(), t.position.clone().into());
            m.insert("color".into(), c.clone().into());
        }
        (None, _) => {
            m.insert("position".into(), t.position.clone().into());
        }
    }
    Value::Object(m)
}

/// Lower-case alphanumeric tokens.
pub fn tokenize(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Parse a single profile. The identifier must be present in the document.
pub fn parse_profile(raw: &str) -> Result<ObjectProfile, ProfileError> {
    let value: Value = serde_json::from_str(raw)?;
    profile_from_value(&value, None)
}

/// Parse from an already decoded value, using `fallback_id` when the document
/// carries no identifier of its own.
pub fn profile_from_value(value: &Value, fallback_id: Option<&str>) -> Result<ObjectProfile, ProfileError> {
    let obj = value.as_object().ok_or(ProfileError::NotAnObject)?;

    let str_field = |key: &str| -> Result<String, ProfileError> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(field_err(key, "expected a string")),
            None => Err(field_err(key, "missing")),
        }
    };
    let opt_str = |key: &str| -> Result<Option<String>, ProfileError> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(field_err(key, "expected a string")),
        }
    };

    let name = opt_str("name")?;
    let filename = opt_str("filename")?;
    let (identifier, identifier_key) = match (name, filename) {
        (Some(n), Some(f)) if n != f => {
            return Err(ProfileError::ConflictingIdentifier { name: n, filename: f })
        }
        (Some(n), _) => (n, "name"),
        (None, Some(f)) => (f, "filename"),
        (None, None) => match fallback_id {
            Some(id) => (id.to_string(), "name"),
            None => return Err(ProfileError::MissingIdentifier),
        },
    };
    if identifier.trim().is_empty() {
        return Err(ProfileError::MissingIdentifier);
    }

    let shape = str_field("shape")?;
    let function = str_field("function")?;
    let summary = str_field("summary")?;
    if summary.trim().is_empty() {
        return Err(field_err("summary", "must not be empty"));
    }

    let colors = match obj.get("colors") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let o = item
                    .as_object()
                    .ok_or_else(|| field_err(&format!("colors[{i}]"), "expected an object"))?;
                let get = |k: &str| {
                    o.get(k)
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .ok_or_else(|| field_err(&format!("colors[{i}].{k}"), "missing or not a string"))
                };
                Ok(ColorEntry {
                    description: get("description")?,
                    color: get("color")?,
                })
            })
            .collect::<Result<_, ProfileError>>()?,
        Some(_) => return Err(field_err("colors", "expected an array")),
    };

    let mut texts_none = false;
    let texts = match obj.get("texts") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::String(s)) if s.trim().eq_ignore_ascii_case("none") => {
            texts_none = true;
            Vec::new()
        }
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, item)| parse_text_entry(i, item))
            .collect::<Result<_, ProfileError>>()?,
        Some(_) => return Err(field_err("texts", "expected an array or \"None\"")),
    };

    let extra: Map<String, Value> = obj
        .iter()
        .filter(|(k, _)| !KNOWN_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    let mut key_order: Vec<String> = obj.keys().cloned().collect();
    if !key_order.iter().any(|k| k == "name" || k == "filename") {
        // identifier supplied by the caller; write it where the canonical layout puts it
        let at = key_order.iter().position(|k| k == "texts").map_or(key_order.len(), |p| p + 1);
        key_order.insert(at, identifier_key.to_string());
    }

    Ok(ObjectProfile {
        identifier,
        shape,
        colors,
        texts,
        function,
        summary,
        extra,
        layout: Layout {
            key_order,
            identifier_key,
            texts_none,
        },
    })
}

fn parse_text_entry(i: usize, item: &Value) -> Result<TextEntry, ProfileError> {
    let o = item
        .as_object()
        .ok_or_else(|| field_err(&format!("texts[{i}]"), "expected an object"))?;
    let text = o
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| field_err(&format!("texts[{i}].text"), "missing or not a string"))?
        .to_string();
    let position = o.get("position").and_then(Value::as_str).unwrap_or("").to_string();
    match o.get("color") {
        Some(Value::String(c)) => Ok(TextEntry::new(text, position, Some(c.clone()))),
        Some(Value::Null) | None => match position.rsplit_once(", ") {
            Some((pos, color)) if !color.trim().is_empty() => Ok(TextEntry {
                text,
                position: pos.to_string(),
                color: Some(color.to_string()),
                inline_color: true,
            }),
            _ => Ok(TextEntry::new(text, position, None)),
        },
        Some(_) => Err(field_err(&format!("texts[{i}].color"), "expected a string")),
    }
}

struct SpacedFormatter;

impl serde_json::ser::Formatter for SpacedFormatter {
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        w.write_all(b": ")
    }

    fn write_string_fragment<W: ?Sized + io::Write>(&mut self, w: &mut W, fragment: &str) -> io::Result<()> {
        for ch in fragment.chars() {
            if ch.is_ascii() {
                w.write_all(&[ch as u8])?;
            } else {
                let mut buf = [0u16; 2];
                for unit in ch.encode_utf16(&mut buf) {
                    write!(w, "\\u{:04x}", unit)?;
                }
            }
        }
        Ok(())
    }
}

/// Compact JSON with spaces after separators and `\uXXXX` escapes for
/// non-ASCII characters.
pub fn to_spaced_json(value: &Value) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SpacedFormatter);
    value
        .serialize(&mut ser)
        .expect("serializing a Value into memory cannot fail");
    String::from_utf8(out).expect("formatter emits ASCII only")
}
