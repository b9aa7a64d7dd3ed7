//! Annotation prompt templates and response parsing.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{Illumination, OcclusionLevel, SceneType, Weather};
use crate::error::{Error, Result};
use crate::geometry::PixelBox;

const SCENE_WEATHER: &str = include_str!("templates/scene_weather.txt");
const LIGHTING: &str = include_str!("templates/lighting.txt");
const OBJECT_EXPRESSION: &str = include_str!("templates/object_expression.txt");
const OCCLUSION: &str = include_str!("templates/occlusion.txt");

/// Placeholder in the occlusion template that receives the box corners.
const OCCLUSION_BOX_SLOT: &str = "[x1, y1, x2, y2]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    SceneWeather,
    Lighting,
    ObjectExpression,
    Occlusion,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [
        PromptKind::SceneWeather,
        PromptKind::Lighting,
        PromptKind::ObjectExpression,
        PromptKind::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::SceneWeather => "scene_weather",
            PromptKind::Lighting => "lighting",
            PromptKind::ObjectExpression => "object_expression",
            PromptKind::Occlusion => "occlusion",
        }
    }

    /// The unrendered template text.
    pub fn template(self) -> &'static str {
        match self {
            PromptKind::SceneWeather => SCENE_WEATHER,
            PromptKind::Lighting => LIGHTING,
            PromptKind::ObjectExpression => OBJECT_EXPRESSION,
            PromptKind::Occlusion => OCCLUSION,
        }
    }

    pub fn needs_object(self) -> bool {
        matches!(self, PromptKind::ObjectExpression | PromptKind::Occlusion)
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Values substituted into object-level templates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptBindings {
    pub category: Option<String>,
    pub bbox: Option<PixelBox>,
}

impl PromptBindings {
    pub fn object(category: impl Into<String>, bbox: PixelBox) -> Self {
        Self {
            category: Some(category.into()),
            bbox: Some(bbox),
        }
    }
}

fn join_numbers(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Renders a prompt. Scene/weather and lighting prompts are the templates
/// verbatim. The object-expression prompt substitutes `{category_name}`
/// and `{bbox}` (as `x, y, w, h`); the occlusion prompt replaces its
/// `[x1, y1, x2, y2]` line with the box corners.
pub fn render_prompt(kind: PromptKind, bindings: &PromptBindings) -> Result<String> {
    if !kind.needs_object() {
        return Ok(kind.template().to_string());
    }
    let category = bindings
        .category
        .as_deref()
        .ok_or(Error::MissingBinding("category_name"))?;
    let bbox = bindings.bbox.ok_or(Error::MissingBinding("bbox"))?;
    Ok(match kind {
        PromptKind::ObjectExpression => kind
            .template()
            .replace("{category_name}", category)
            .replace("{bbox}", &join_numbers(&bbox.to_array())),
        PromptKind::Occlusion => {
            let corners = [bbox.x(), bbox.y(), bbox.right(), bbox.bottom()];
            kind.template()
                .replace(OCCLUSION_BOX_SLOT, &format!("[{}]", join_numbers(&corners)))
        }
        _ => unreachable!(),
    })
}

/// A parsed annotation response.
#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    SceneWeather(SceneType, Weather),
    Lighting(Illumination),
    Occlusion(OcclusionLevel),
    Expression(String),
}

fn parse_code(kind: PromptKind, raw: &str, token: &str) -> Result<u8> {
    let err = |reason: String| Error::Parse {
        kind: kind.name(),
        raw: raw.to_string(),
        reason,
    };
    if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err(format!("`{token}` is not a non-negative integer")));
    }
    token
        .parse::<u8>()
        .map_err(|_| err(format!("`{token}` is out of range")))
}

/// Parses a raw response. Surrounding whitespace is tolerated; anything
/// else that does not match the kind's code table is an error.
pub fn parse_response(kind: PromptKind, raw: &str) -> Result<Annotation> {
    let err = |reason: &str| Error::Parse {
        kind: kind.name(),
        raw: raw.to_string(),
        reason: reason.to_string(),
    };
    let text = raw.trim();
    if text.is_empty() {
        return Err(err("empty response"));
    }
    match kind {
        PromptKind::ObjectExpression => Ok(Annotation::Expression(text.to_string())),
        PromptKind::SceneWeather => {
            let tokens: Vec<&str> = text.split_whitespace().collect();
            if tokens.len() != 2 {
                return Err(err(&format!("expected 2 codes, got {}", tokens.len())));
            }
            let scene = SceneType::from_index(parse_code(kind, raw, tokens[0])?)
                .ok_or_else(|| err("scene code out of range 0-12"))?;
            let weather = Weather::from_index(parse_code(kind, raw, tokens[1])?)
                .ok_or_else(|| err("weather code out of range 0-3"))?;
            Ok(Annotation::SceneWeather(scene, weather))
        }
        PromptKind::Lighting => {
            let tokens: Vec<&str> = text.split_whitespace().collect();
            if tokens.len() != 1 {
                return Err(err(&format!("expected 1 code, got {}", tokens.len())));
            }
            Illumination::from_index(parse_code(kind, raw, tokens[0])?)
                .map(Annotation::Lighting)
                .ok_or_else(|| err("lighting code out of range 0-3"))
        }
        PromptKind::Occlusion => {
            let tokens: Vec<&str> = text.split_whitespace().collect();
            if tokens.len() != 1 {
                return Err(err(&format!("expected 1 code, got {}", tokens.len())));
            }
            OcclusionLevel::new(parse_code(kind, raw, tokens[0])?)
                .map(Annotation::Occlusion)
                .map_err(|_| err("occlusion code out of range 0-2"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_prompts_need_no_bindings() {
        let s = render_prompt(PromptKind::Lighting, &PromptBindings::default()).unwrap();
        assert!(s.contains(
            "0 (very_weak_light), 1 (weak_light), 2 (normal_light), or 3 (strong_light)"
        ));
        let s = render_prompt(PromptKind::SceneWeather, &PromptBindings::default()).unwrap();
        assert!(s.contains("    7-(Intersection),\n"));
    }

    #[test]
    fn object_prompt_substitution() {
        let b = PixelBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let s = render_prompt(PromptKind::ObjectExpression, &PromptBindings::object("car", b))
            .unwrap();
        assert!(!s.contains('{') && !s.contains('}'));
        assert!(s.contains("bounding box coordinates (bbox) of a car."));
        assert!(s.contains("coordinates:[1, 2, 3, 4]\n"));
        let s = render_prompt(PromptKind::Occlusion, &PromptBindings::object("car", b)).unwrap();
        assert!(s.contains("Target object bounding box: [1, 2, 4, 6]\n"));
        assert!(s.ends_with("Return only 0, 1, or 2 without additional text."));
    }

    #[test]
    fn object_prompts_require_bindings() {
        let b = PixelBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let missing_box = PromptBindings {
            category: Some("car".into()),
            bbox: None,
        };
        assert!(matches!(
            render_prompt(PromptKind::ObjectExpression, &missing_box),
            Err(Error::MissingBinding("bbox"))
        ));
        let missing_cat = PromptBindings {
            category: None,
            bbox: Some(b),
        };
        assert!(render_prompt(PromptKind::Occlusion, &missing_cat).is_err());
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_response(PromptKind::Lighting, "2").unwrap(),
            Annotation::Lighting(Illumination::Normal)
        );
        assert_eq!(
            parse_response(PromptKind::SceneWeather, "7 3").unwrap(),
            Annotation::SceneWeather(SceneType::Intersection, Weather::Cloudy)
        );
        assert!(parse_response(PromptKind::Occlusion, "5").is_err());
        assert_eq!(
            parse_response(PromptKind::Occlusion, " 2\n").unwrap(),
            Annotation::Occlusion(OcclusionLevel::new(2).unwrap())
        );
        assert_eq!(
            parse_response(PromptKind::ObjectExpression, "  a red car on the left.\n").unwrap(),
            Annotation::Expression("a red car on the left.".into())
        );
    }

    #[test]
    fn parse_rejects_malformed() {
        for (kind, raw) in [
            (PromptKind::SceneWeather, "7"),
            (PromptKind::SceneWeather, "7 3 1 0"),
            (PromptKind::SceneWeather, "13 0"),
            (PromptKind::SceneWeather, "0 4"),
            (PromptKind::SceneWeather, "7,3"),
            (PromptKind::Lighting, "4"),
            (PromptKind::Lighting, "-1"),
            (PromptKind::Lighting, "+2"),
            (PromptKind::Lighting, "2.0"),
            (PromptKind::Lighting, "normal"),
            (PromptKind::Lighting, "2 2"),
            (PromptKind::Occlusion, "300"),
            (PromptKind::ObjectExpression, "   "),
            (PromptKind::Lighting, ""),
        ] {
            assert!(parse_response(kind, raw).is_err(), "{kind} accepted {raw:?}");
        }
    }
}
