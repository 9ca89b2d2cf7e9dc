//! Object profile generation from each instance's detail image.

use crate::chat::{bounded_map, BackendError, ChatBackend, ChatRequest, PromptPair};
use crate::profile::{profile_from_value, ObjectProfile, ProfileError};
use crate::refdb::ReferenceInstance;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use thiserror::Error;

pub const MAX_ATTEMPTS: usize = 3;

pub const DESCRIBE_SYSTEM_PROMPT: &str = "You are an expert at structured data extraction. \
You will be given a picture. Please extract information and convert it into the given structure.";

pub const DESCRIBE_USER_PROMPT: &str = "\
You are given an image of an item on a flat surface (on a table, ground, etc.).
Please first carefully read and understand the image in detail.
If there are multiple items, only carefully look through one of them.
Then, describe the item in detail by following the steps and format below.

1. Shape: Please describe the shape or type of the item, such as a bottle,
bag, round item, square item, etc.

2. Colors: Please describe all the colors on or in the item, such as label colors,
text colors, cover colors, etc. The item may be covered by multiple colors.
Please describe all of them one by one. For example, bottle: transparent, liquid
in the bottle: black, the main color of the bag: green, the text on the item: black, etc.

3. Texts: Please extract all texts on the item with the position and color of the text.
For example, \"ingredients: on the surface, black\". If there is no recognized text,
please only output \"None\".

4. Function: Please describe the usage of the item in the given picture.

5. Summary of the item: Please summarize the above descriptions in sentences one-by-one.
";

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error("instance {0} has no detail image")]
    NoDetailImage(String),
    #[error("instance {name}: backend failed after {attempts} attempt(s): {source}")]
    Backend {
        name: String,
        attempts: usize,
        #[source]
        source: BackendError,
    },
    #[error("instance {name}: no valid profile after {attempts} attempt(s): {source}")]
    Schema {
        name: String,
        attempts: usize,
        #[source]
        source: ProfileError,
    },
}

pub fn build_description_prompt(instance: &ReferenceInstance) -> Result<PromptPair, DescribeError> {
    let image = instance
        .detail_image_path
        .clone()
        .ok_or_else(|| DescribeError::NoDetailImage(instance.name.clone()))?;
    Ok(PromptPair {
        system: DESCRIBE_SYSTEM_PROMPT.to_string(),
        user: DESCRIBE_USER_PROMPT.to_string(),
        image: Some(image),
    })
}

pub fn profile_schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "shape": {"type": "string"},
            "colors": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {"description": {"type": "string"}, "color": {"type": "string"}},
                    "required": ["description", "color"]
                }
            },
            "texts": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {"text": {"type": "string"}, "position": {"type": "string"}},
                    "required": ["text", "position"]
                }
            },
            "function": {"type": "string"},
            "summary": {"type": "string"}
        },
        "required": ["shape", "colors", "texts", "function", "summary"]
    })
}

/// Ask the backend for a profile, retrying on transport or schema failures.
/// The instance name fills in the identifier when the answer has none.
pub fn generate_profile(
    instance: &ReferenceInstance,
    backend: &dyn ChatBackend,
    model: &str,
) -> Result<ObjectProfile, DescribeError> {
    let prompt = build_description_prompt(instance)?;
    let request = ChatRequest {
        model: model.to_string(),
        prompt,
        schema_name: "object_profile".into(),
        schema: profile_schema(),
        key: instance.name.clone(),
    };
    let mut last: Option<DescribeError> = None;
    for attempt in 1..=MAX_ATTEMPTS {
        match backend.complete(&request) {
            Err(source) => {
                log::warn!("{}: attempt {attempt} failed: {source}", instance.name);
                last = Some(DescribeError::Backend {
                    name: instance.name.clone(),
                    attempts: attempt,
                    source,
                });
            }
            Ok(text) => {
                let parsed = serde_json::from_str::<Value>(&text)
                    .map_err(ProfileError::from)
                    .and_then(|v| profile_from_value(&v, Some(&instance.name)));
                match parsed {
                    Ok(p) => return Ok(p),
                    Err(source) => {
                        log::warn!("{}: attempt {attempt} unparsable: {source}", instance.name);
                        last = Some(DescribeError::Schema {
                            name: instance.name.clone(),
                            attempts: attempt,
                            source,
                        });
                    }
                }
            }
        }
    }
    Err(last.expect("at least one attempt was made"))
}

/// Describe many instances, at most `max_inflight` requests at a time.
/// Results are keyed by instance id.
pub fn generate_profiles(
    instances: &[ReferenceInstance],
    backend: &dyn ChatBackend,
    model: &str,
    max_inflight: usize,
) -> BTreeMap<u32, Result<ObjectProfile, DescribeError>> {
    let results = bounded_map(instances, max_inflight, |inst| generate_profile(inst, backend, model));
    instances.iter().map(|i| i.instance_id).zip(results).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn inst(name: &str, detail: Option<&str>) -> ReferenceInstance {
        ReferenceInstance {
            instance_id: 1,
            name: name.into(),
            templates: vec![],
            detail_image_path: detail.map(PathBuf::from),
            profile: None,
        }
    }

    struct Scripted {
        answers: Vec<String>,
        calls: AtomicUsize,
    }

    impl ChatBackend for Scripted {
        fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.answers[i.min(self.answers.len() - 1)].clone())
        }
    }

    #[test]
    fn prompts_differ_only_in_the_image() {
        let a = build_description_prompt(&inst("001_a", Some("a/detail.png"))).unwrap();
        let b = build_description_prompt(&inst("002_b", Some("b/detail.png"))).unwrap();
        assert_eq!(a.system, b.system);
        assert_eq!(a.user, b.user);
        assert_ne!(a.image, b.image);
        for step in ["1. Shape:", "2. Colors:", "3. Texts:", "4. Function:", "5. Summary of the item:"] {
            assert_eq!(a.user.matches(step).count(), 1, "{step}");
        }
    }

    #[test]
    fn missing_detail_image_fails_before_any_call() {
        let backend = Scripted {
            answers: vec!["{}".into()],
            calls: AtomicUsize::new(0),
        };
        let err = generate_profile(&inst("001_a", None), &backend, "m").unwrap_err();
        assert!(matches!(err, DescribeError::NoDetailImage(_)));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn gives_up_after_three_bad_answers() {
        let backend = Scripted {
            answers: vec!["not json".into()],
            calls: AtomicUsize::new(0),
        };
        let err = generate_profile(&inst("001_a", Some("x.png")), &backend, "m").unwrap_err();
        assert!(matches!(err, DescribeError::Schema { attempts: 3, .. }));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn recovers_on_a_later_attempt() {
        let good = r#"{"shape":"can","colors":[],"texts":"None","function":"f","summary":"s"}"#;
        let backend = Scripted {
            answers: vec!["oops".into(), good.into()],
            calls: AtomicUsize::new(0),
        };
        let p = generate_profile(&inst("004_can", Some("x.png")), &backend, "m").unwrap();
        assert_eq!(p.identifier, "004_can");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }
}
