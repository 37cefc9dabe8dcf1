//! Annotation and pose-output JSON files.
//!
//! Annotation files:
//!
//! ```json
//! {"images":[{"id":"a","width":256,"height":256,
//!   "persons":[{"joints":[[x,y,v], ...16], "headbox":[x1,y1,x2,y2]}]}]}
//! ```
//!
//! `v` is 1 for visible, 0 for absent. `headbox` may be `null`.
//!
//! Pose files:
//!
//! ```json
//! {"images":[{"id":"a","persons":[{"score":0.9,"centroid":[x,y],
//!   "joints":[[x,y,score] | null, ...16]}]}]}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::skeleton::NUM_JOINTS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Joint {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Self { x, y, visible }
    }

    pub fn absent() -> Self {
        Self::new(0.0, 0.0, false)
    }
}

impl From<[f64; 3]> for Joint {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2] > 0.0)
    }
}

impl From<Joint> for [f64; 3] {
    fn from(j: Joint) -> Self {
        [j.x, j.y, if j.visible { 1.0 } else { 0.0 }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct HeadBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl HeadBox {
    pub fn diagonal(&self) -> f64 {
        (self.x2 - self.x1).hypot(self.y2 - self.y1)
    }
}

impl From<[f64; 4]> for HeadBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        }
    }
}

impl From<HeadBox> for [f64; 4] {
    fn from(b: HeadBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonAnnotation {
    pub joints: Vec<Joint>,
    pub headbox: Option<HeadBox>,
}

impl PersonAnnotation {
    pub fn visible_joints(&self) -> impl Iterator<Item = (usize, &Joint)> {
        self.joints.iter().enumerate().filter(|(_, j)| j.visible)
    }
}

/// All persons in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseAnnotation {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub persons: Vec<PersonAnnotation>,
}

impl PoseAnnotation {
    pub fn empty(id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id: id.into(),
            width,
            height,
            persons: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<PoseAnnotation>,
}

impl AnnotationFile {
    /// Parses and validates; errors carry a JSON-path style location.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        validate_annotation_value(&value)?;
        let file: Self = serde_json::from_value(value)?;
        Ok(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePerson {
    pub score: f64,
    pub centroid: [f64; 2],
    pub joints: Vec<Option<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePoses {
    pub id: String,
    pub persons: Vec<PosePerson>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseFile {
    pub images: Vec<ImagePoses>,
}

impl PoseFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        validate_pose_value(&value)?;
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

fn schema(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        location: location.into(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Value, key: &str, at: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| schema(at, format!("missing field `{key}`")))
}

fn array<'a>(v: &'a Value, at: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| schema(at, "expected an array"))
}

fn numbers(v: &Value, len: usize, at: &str) -> Result<Vec<f64>> {
    let a = array(v, at)?;
    if a.len() != len {
        return Err(schema(
            at,
            format!("expected {len} numbers, found {}", a.len()),
        ));
    }
    a.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| schema(format!("{at}[{i}]"), "expected a finite number"))
        })
        .collect()
}

fn images(root: &Value) -> Result<&Vec<Value>> {
    if !root.is_object() {
        return Err(schema("$", "expected an object"));
    }
    array(field(root, "images", "$")?, "$.images")
}

fn image_id(img: &Value, at: &str) -> Result<()> {
    if !img.is_object() {
        return Err(schema(at, "expected an object"));
    }
    field(img, "id", at)?
        .as_str()
        .map(|_| ())
        .ok_or_else(|| schema(format!("{at}.id"), "expected a string"))
}

fn validate_annotation_value(root: &Value) -> Result<()> {
    for (i, img) in images(root)?.iter().enumerate() {
        let at = format!("$.images[{i}]");
        image_id(img, &at)?;
        let mut size = [0u64; 2];
        for (k, key) in ["width", "height"].iter().enumerate() {
            size[k] = field(img, key, &at)?
                .as_u64()
                .filter(|&s| s > 0)
                .ok_or_else(|| schema(format!("{at}.{key}"), "expected a positive integer"))?;
        }
        let persons = array(field(img, "persons", &at)?, &format!("{at}.persons"))?;
        for (p, person) in persons.iter().enumerate() {
            let at = format!("{at}.persons[{p}]");
            let joints = array(field(person, "joints", &at)?, &format!("{at}.joints"))?;
            if joints.len() != NUM_JOINTS {
                return Err(schema(
                    format!("{at}.joints"),
                    format!("expected {NUM_JOINTS} joints, found {}", joints.len()),
                ));
            }
            for (j, joint) in joints.iter().enumerate() {
                let at = format!("{at}.joints[{j}]");
                let v = numbers(joint, 3, &at)?;
                if v[2] > 0.0 && !(0.0..size[0] as f64).contains(&v[0])
                    || v[2] > 0.0 && !(0.0..size[1] as f64).contains(&v[1])
                {
                    return Err(schema(at, "visible joint outside the image"));
                }
            }
            match person.get("headbox") {
                None | Some(Value::Null) => {}
                Some(b) => {
                    numbers(b, 4, &format!("{at}.headbox"))?;
                }
            }
        }
    }
    Ok(())
}

fn validate_pose_value(root: &Value) -> Result<()> {
    for (i, img) in images(root)?.iter().enumerate() {
        let at = format!("$.images[{i}]");
        image_id(img, &at)?;
        let persons = array(field(img, "persons", &at)?, &format!("{at}.persons"))?;
        for (p, person) in persons.iter().enumerate() {
            let at = format!("{at}.persons[{p}]");
            field(person, "score", &at)?
                .as_f64()
                .ok_or_else(|| schema(format!("{at}.score"), "expected a number"))?;
            numbers(
                field(person, "centroid", &at)?,
                2,
                &format!("{at}.centroid"),
            )?;
            let joints = array(field(person, "joints", &at)?, &format!("{at}.joints"))?;
            if joints.len() != NUM_JOINTS {
                return Err(schema(
                    format!("{at}.joints"),
                    format!("expected {NUM_JOINTS} entries, found {}", joints.len()),
                ));
            }
            for (j, joint) in joints.iter().enumerate() {
                if !joint.is_null() {
                    numbers(joint, 3, &format!("{at}.joints[{j}]"))?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person_json(v: &str) -> String {
        let joints = vec![format!("[10,20,{v}]"); NUM_JOINTS].join(",");
        format!(r#"{{"joints":[{joints}],"headbox":[0,0,10,10]}}"#)
    }

    #[test]
    fn round_trips_through_json() {
        let text = format!(
            r#"{{"images":[{{"id":"a","width":64,"height":32,"persons":[{}]}}]}}"#,
            person_json("1")
        );
        let f = AnnotationFile::from_json(&text).unwrap();
        assert_eq!(
            f.images[0].persons[0].joints[3],
            Joint::new(10.0, 20.0, true)
        );
        let again = AnnotationFile::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn null_headbox_is_accepted() {
        let joints = vec!["[1,1,0]"; NUM_JOINTS].join(",");
        let text = format!(
            r#"{{"images":[{{"id":"a","width":8,"height":8,"persons":[{{"joints":[{joints}],"headbox":null}}]}}]}}"#
        );
        let f = AnnotationFile::from_json(&text).unwrap();
        assert!(f.images[0].persons[0].headbox.is_none());
    }

    #[test]
    fn schema_errors_carry_location() {
        let joints = vec!["[1,1,1]"; 15].join(",");
        let text = format!(
            r#"{{"images":[{{"id":"a","width":8,"height":8,"persons":[{{"joints":[{joints}],"headbox":null}}]}}]}}"#
        );
        match AnnotationFile::from_json(&text) {
            Err(Error::Schema { location, .. }) => {
                assert_eq!(location, "$.images[0].persons[0].joints")
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = r#"{"images":[{"id":"a","width":8,"height":8,"persons":[]},{"id":3}]}"#;
        match AnnotationFile::from_json(text) {
            Err(Error::Schema { location, .. }) => assert_eq!(location, "$.images[1].id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn visible_joint_outside_image_rejected() {
        let text = format!(
            r#"{{"images":[{{"id":"a","width":8,"height":8,"persons":[{}]}}]}}"#,
            person_json("1")
        );
        assert!(matches!(
            AnnotationFile::from_json(&text),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn pose_file_allows_null_joints() {
        let mut joints = vec!["null"; NUM_JOINTS];
        joints[0] = "[1,2,0.5]";
        let text = format!(
            r#"{{"images":[{{"id":"a","persons":[{{"score":0.5,"centroid":[1,2],"joints":[{}]}}]}}]}}"#,
            joints.join(",")
        );
        let f = PoseFile::from_json(&text).unwrap();
        assert_eq!(f.images[0].persons[0].joints[0], Some([1.0, 2.0, 0.5]));
        assert!(f.images[0].persons[0].joints[1].is_none());
    }
}
