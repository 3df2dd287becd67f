use serde_json::Value;

use super::{Description, OracleResponse, RegionEvidence};
use crate::corpus::BoundingBox;
use crate::error::{Error, Result};

/// Byte range of the balanced `{...}` starting at `start`, honouring JSON
/// string escapes.
fn balanced_object(s: &str, start: usize) -> Option<&str> {
    let bytes = s.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// First top-level JSON object embedded in `raw`.
fn outermost_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let text = balanced_object(raw, i)?;
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(map)) => Some(map),
            _ => None,
        }
    })
}

fn coordinate(v: &Value) -> Option<i64> {
    let f = v.as_f64()?;
    f.is_finite().then(|| f.round() as i64)
}

/// Clamps to the image and rejects empty boxes.
fn clamp_box(area: &Value, width: u32, height: u32) -> Option<BoundingBox> {
    let coords = area.as_array()?;
    if coords.len() != 4 {
        return None;
    }
    let c: Vec<i64> = coords.iter().map(coordinate).collect::<Option<_>>()?;
    let x1 = c[0].clamp(0, width as i64);
    let y1 = c[1].clamp(0, height as i64);
    let x2 = c[2].clamp(0, width as i64);
    let y2 = c[3].clamp(0, height as i64);
    (x1 < x2 && y1 < y2).then(|| BoundingBox::new(x1 as u32, y1 as u32, x2 as u32, y2 as u32))
}

/// Parses a region-selection answer of the form
/// `{"think": ..., "boxes": [{"area": [x1, y1, x2, y2], "description": ...}]}`,
/// tolerating prose or code fences around the object.
pub fn parse_vlm_response(raw: &str, width: u32, height: u32) -> Result<OracleResponse> {
    let obj = outermost_object(raw).ok_or(Error::ResponseParse)?;
    let boxes = obj
        .get("boxes")
        .ok_or_else(|| Error::ResponseSchema("missing key \"boxes\"".into()))?
        .as_array()
        .ok_or_else(|| Error::ResponseSchema("\"boxes\" is not an array".into()))?;
    let think = match obj.get("think") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(Error::ResponseSchema("\"think\" is not a string".into())),
    };

    let mut regions = Vec::with_capacity(boxes.len());
    let mut dropped = 0;
    for entry in boxes {
        let parsed = entry.as_object().and_then(|e| {
            let bbox = clamp_box(e.get("area")?, width, height)?;
            let text = e.get("description")?.as_str()?.trim();
            (!text.is_empty()).then(|| RegionEvidence {
                bbox,
                description: Description::Text(text.to_owned()),
            })
        });
        match parsed {
            Some(r) => regions.push(r),
            None => dropped += 1,
        }
    }
    if regions.is_empty() {
        return Err(Error::ResponseValidation(format!(
            "none of {} boxes survived validation",
            boxes.len()
        )));
    }
    Ok(OracleResponse {
        think,
        regions,
        dropped_boxes: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE_FORMAT: &str = r#"{ "think": "The query asks for the total; it is in the bottom table.", "boxes": [{ "area": [10, 200, 300, 320], "description": "totals row of the table, answers the query" }]}"#;

    #[test]
    fn accepts_the_documented_format() {
        let r = parse_vlm_response(TABLE_FORMAT, 336, 336).unwrap();
        assert_eq!(r.think, "The query asks for the total; it is in the bottom table.");
        assert_eq!(r.regions.len(), 1);
        assert_eq!(r.regions[0].bbox, BoundingBox::new(10, 200, 300, 320));
        assert_eq!(r.dropped_boxes, 0);
    }

    #[test]
    fn tolerates_fences_and_prose() {
        let raw = format!("Sure, here you go:\n```json\n{TABLE_FORMAT}\n```\nHope that helps {{not json}}");
        assert_eq!(parse_vlm_response(&raw, 336, 336).unwrap().regions.len(), 1);
        let braces_in_strings = r#"{"think": "a } brace and a \" quote {", "boxes": [{"area": [0,0,5,5], "description": "x"}]}"#;
        assert_eq!(parse_vlm_response(braces_in_strings, 10, 10).unwrap().think, "a } brace and a \" quote {");
    }

    #[test]
    fn error_classes() {
        assert!(matches!(parse_vlm_response("no json here", 10, 10), Err(Error::ResponseParse)));
        assert!(matches!(parse_vlm_response("{\"think\": \"x\"", 10, 10), Err(Error::ResponseParse)));
        assert!(matches!(
            parse_vlm_response(r#"{"think": "x", "regions": []}"#, 10, 10),
            Err(Error::ResponseSchema(_))
        ));
        assert!(matches!(
            parse_vlm_response(r#"{"boxes": {"area": [0,0,1,1]}}"#, 10, 10),
            Err(Error::ResponseSchema(_))
        ));
        assert!(matches!(
            parse_vlm_response(r#"{"boxes": [{"area": [50,50,40,60], "description": "d"}]}"#, 100, 100),
            Err(Error::ResponseValidation(_))
        ));
    }

    #[test]
    fn degenerate_boxes_are_dropped_and_overflow_clamped() {
        let raw = r#"{"boxes": [
            {"area": [50,50,40,60], "description": "inverted"},
            {"area": [-5, 300, 120.4, 400], "description": "overflowing"},
            {"area": [1,2,3], "description": "short"},
            {"area": [0,0,10,10], "description": ""},
            {"area": [0,0,10,10]}
        ]}"#;
        let r = parse_vlm_response(raw, 336, 336).unwrap();
        assert_eq!(r.regions.len(), 1);
        assert_eq!(r.regions[0].bbox, BoundingBox::new(0, 300, 120, 336));
        assert_eq!(r.dropped_boxes, 4);
        assert!(r.regions[0].bbox.validate(336, 336).is_ok());
    }
}
