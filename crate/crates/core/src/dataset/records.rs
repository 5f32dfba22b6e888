use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::geometry::Point2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub category: String,
    pub position: Point2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub category: String,
    pub gt_positions: Vec<Point2>,
}

/// A partially observed scene: the observed objects and the categories whose
/// instances lie in the unobserved part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: String,
    pub completeness: f64,
    pub objects: Vec<SceneObject>,
    pub targets: Vec<TargetSpec>,
}

impl SceneRecord {
    pub fn target(&self, category: &str) -> Option<&TargetSpec> {
        self.targets.iter().find(|t| t.category == category)
    }
}

/// Structural rules every usable record satisfies.
pub fn validate_record(r: &SceneRecord) -> Result<(), DatasetError> {
    let fail = |rule: String| DatasetError::InvariantViolation { scene: r.scene_id.clone(), rule };
    if r.scene_id.is_empty() {
        return Err(fail("scene_id is empty".into()));
    }
    if r.objects.len() < crate::graph::MIN_ANCHORS {
        return Err(fail(format!(
            "{} observed objects, at least {} required",
            r.objects.len(),
            crate::graph::MIN_ANCHORS
        )));
    }
    let mut ids = HashSet::new();
    for o in &r.objects {
        if !ids.insert(o.id) {
            return Err(fail(format!("duplicate object id {}", o.id)));
        }
        if o.category.is_empty() || o.category.contains(char::is_whitespace) {
            return Err(fail(format!("object {} has an invalid category `{}`", o.id, o.category)));
        }
        if !(o.position.x.is_finite() && o.position.y.is_finite()) {
            return Err(fail(format!("object {} has a non-finite position", o.id)));
        }
    }
    let mut seen = HashSet::new();
    for t in &r.targets {
        if !seen.insert(t.category.as_str()) {
            return Err(fail(format!("target `{}` listed twice", t.category)));
        }
        if t.gt_positions.is_empty() {
            return Err(fail(format!("target `{}` has no ground-truth position", t.category)));
        }
        if t.gt_positions.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(fail(format!("target `{}` has a non-finite position", t.category)));
        }
    }
    Ok(())
}

/// Parse newline-delimited JSON scene records.
pub fn parse_scenes(text: &str) -> Result<Vec<SceneRecord>, DatasetError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(line)
            .map_err(|e| DatasetError::Parse { line: line_no, message: e.to_string() })?;
        if !(0.0..=1.0).contains(&record.completeness) {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("completeness {} outside [0, 1]", record.completeness),
            });
        }
        validate_record(&record)?;
        if !ids.insert(record.scene_id.clone()) {
            return Err(DatasetError::InvariantViolation {
                scene: record.scene_id,
                rule: "scene_id repeated in file".into(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn scenes_to_string(records: &[SceneRecord]) -> Result<String, DatasetError> {
    let mut out = String::new();
    for r in records {
        validate_record(r)?;
        out.push_str(&serde_json::to_string(r).expect("scene records always serialise"));
        out.push('\n');
    }
    Ok(out)
}

pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    parse_scenes(&text)
}

pub fn write_scenes(path: impl AsRef<Path>, records: &[SceneRecord]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let text = scenes_to_string(records)?;
    std::fs::write(path, text)
        .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"scene_id":"a_p1","completeness":0.5,"objects":[{"id":0,"category":"bed","position":[0.0,0.0]},{"id":1,"category":"desk","position":[4.0,0.0]},{"id":2,"category":"lamp","position":[0.0,3.0]}],"targets":[{"category":"pillow","gt_positions":[[1.0,1.0]]}]}"#;

    #[test]
    fn parses_documented_format() {
        let recs = parse_scenes(LINE).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].objects[1].position, Point2::new(4.0, 0.0));
        assert_eq!(recs[0].targets[0].gt_positions, vec![Point2::new(1.0, 1.0)]);
        assert_eq!(scenes_to_string(&recs).unwrap().trim_end(), LINE);
    }

    #[test]
    fn two_objects_violate_invariant() {
        let line = LINE.replace(r#",{"id":2,"category":"lamp","position":[0.0,3.0]}"#, "");
        let err = parse_scenes(&line).unwrap_err();
        assert!(matches!(err, DatasetError::InvariantViolation { ref scene, .. } if scene == "a_p1"));
    }

    #[test]
    fn completeness_out_of_range_is_parse_error() {
        let line = LINE.replace("0.5", "1.2");
        let err = parse_scenes(&format!("\n{line}")).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 2, .. }));
    }

    #[test]
    fn malformed_json_names_line() {
        let err = parse_scenes(&format!("{LINE}\n{{not json")).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 2, .. }));
    }

    #[test]
    fn duplicate_scene_ids_rejected() {
        let err = parse_scenes(&format!("{LINE}\n{LINE}")).unwrap_err();
        assert!(matches!(err, DatasetError::InvariantViolation { .. }));
    }

    #[test]
    fn empty_ground_truth_rejected() {
        let line = LINE.replace("[[1.0,1.0]]", "[]");
        assert!(matches!(parse_scenes(&line).unwrap_err(), DatasetError::InvariantViolation { .. }));
    }
}
