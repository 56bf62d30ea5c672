//! Sequence files: a JSON document (`.json`) and a packed binary twin
//! (`.hoib`) with the same content.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Clip;
use crate::binary::{put_f64, put_str, put_u32, Reader};
use crate::error::{Error, Result};
use crate::rotation::{rotation_from_rot6d, Vec3};
use crate::shape::ObjectShape;
use crate::types::{HoiSequence, HumanPose, ObjectPose, Split};

pub const FORMAT_VERSION: &str = "interdiff-hoi/1";
const BINARY_MAGIC: &[u8; 8] = b"IDIFHOIB";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitDoc {
    #[serde(rename = "H")]
    past: usize,
    #[serde(rename = "F")]
    future: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HumanDoc {
    joints: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    rot6d: Vec<[f64; 6]>,
    trans: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeDoc {
    points: Vec<[f64; 3]>,
    keypoints: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipDoc {
    version: String,
    fps: f64,
    split: SplitDoc,
    human: HumanDoc,
    object: ObjectDoc,
    shape: ShapeDoc,
}

fn to_doc(clip: &Clip) -> ClipDoc {
    let seq = &clip.seq;
    ClipDoc {
        version: FORMAT_VERSION.to_string(),
        fps: seq.fps,
        split: SplitDoc {
            past: seq.split.past,
            future: seq.split.future,
        },
        human: HumanDoc {
            joints: seq.human.iter().map(|h| h.joints.iter().map(|p| [p.x, p.y, p.z]).collect()).collect(),
        },
        object: ObjectDoc {
            rot6d: seq.object.iter().map(ObjectPose::rot6d).collect(),
            trans: seq.object.iter().map(|o| [o.translation.x, o.translation.y, o.translation.z]).collect(),
        },
        shape: ShapeDoc {
            points: clip.shape.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            keypoints: clip.shape.keypoints.clone(),
        },
    }
}

fn field(e: Error, name: &str) -> Error {
    match e {
        Error::Parse { .. } => e,
        other => Error::parse(name, other.to_string()),
    }
}

fn from_doc(doc: ClipDoc) -> Result<Clip> {
    if doc.object.rot6d.len() != doc.object.trans.len() {
        return Err(Error::parse(
            "object",
            format!("{} rotations but {} translations", doc.object.rot6d.len(), doc.object.trans.len()),
        ));
    }
    let human = doc
        .human
        .joints
        .into_iter()
        .enumerate()
        .map(|(i, js)| HumanPose::new(js.into_iter().map(Vec3::from).collect()).map_err(|e| field(e, &format!("human.joints[{i}]"))))
        .collect::<Result<Vec<_>>>()?;
    let object = doc
        .object
        .rot6d
        .iter()
        .zip(&doc.object.trans)
        .enumerate()
        .map(|(i, (r, t))| {
            let rot = rotation_from_rot6d(r).map_err(|e| field(e, &format!("object.rot6d[{i}]")))?;
            Ok(ObjectPose::new(rot, Vec3::from(*t)))
        })
        .collect::<Result<Vec<_>>>()?;
    let split = Split::new(doc.split.past, doc.split.future).map_err(|e| field(e, "split"))?;
    let seq = HoiSequence::new(human, object, doc.fps, split).map_err(|e| field(e, "sequence"))?;
    let shape = ObjectShape::new(doc.shape.points.into_iter().map(Vec3::from).collect(), doc.shape.keypoints)
        .map_err(|e| field(e, "shape"))?;
    Ok(Clip { seq, shape })
}

/// Another release of the format is a version error; anything else in the
/// version slot means the file is not a sequence file at all.
fn check_version(found: &str) -> Result<()> {
    if found == FORMAT_VERSION {
        return Ok(());
    }
    let family = FORMAT_VERSION.split('/').next().unwrap_or_default();
    match found.strip_prefix(family).and_then(|rest| rest.strip_prefix('/')) {
        Some(_) => Err(Error::Version {
            found: found.to_string(),
            expected: FORMAT_VERSION.to_string(),
        }),
        None => Err(Error::parse("version", format!("{found:?} is not a sequence format version"))),
    }
}

pub fn to_json(clip: &Clip) -> Result<String> {
    serde_json::to_string(&to_doc(clip)).map_err(|e| Error::InvalidValue(e.to_string()))
}

pub fn from_json(text: &str) -> Result<Clip> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    match value.get("version") {
        Some(serde_json::Value::String(v)) => check_version(v)?,
        _ => return Err(Error::parse("version", "missing or non-string version field")),
    }
    let doc: ClipDoc = serde_json::from_value(value).map_err(|e| Error::parse("document", e.to_string()))?;
    from_doc(doc)
}

pub fn to_binary(clip: &Clip) -> Vec<u8> {
    let seq = &clip.seq;
    let mut buf = Vec::new();
    buf.extend_from_slice(BINARY_MAGIC);
    put_str(&mut buf, FORMAT_VERSION);
    put_f64(&mut buf, seq.fps);
    put_u32(&mut buf, seq.split.past as u32);
    put_u32(&mut buf, seq.split.future as u32);
    put_u32(&mut buf, seq.frames() as u32);
    put_u32(&mut buf, seq.joint_count() as u32);
    for (h, o) in seq.human.iter().zip(&seq.object) {
        for p in &h.joints {
            p.iter().for_each(|v| put_f64(&mut buf, *v));
        }
        o.rot6d().iter().for_each(|v| put_f64(&mut buf, *v));
        o.translation.iter().for_each(|v| put_f64(&mut buf, *v));
    }
    put_u32(&mut buf, clip.shape.len() as u32);
    for p in &clip.shape.points {
        p.iter().for_each(|v| put_f64(&mut buf, *v));
    }
    put_u32(&mut buf, clip.shape.keypoints.len() as u32);
    for k in &clip.shape.keypoints {
        put_u32(&mut buf, *k as u32);
    }
    buf
}

fn read_vec3(r: &mut Reader, what: &str) -> Result<[f64; 3]> {
    Ok([r.f64(what)?, r.f64(what)?, r.f64(what)?])
}

pub fn from_binary(data: &[u8]) -> Result<Clip> {
    let mut r = Reader::new(data);
    if r.take(8, "magic")? != BINARY_MAGIC {
        return Err(Error::parse("byte 0", "not a binary sequence file"));
    }
    let version = r.string("version")?;
    check_version(&version)?;
    let fps = r.f64("fps")?;
    let past = r.u32("split.H")? as usize;
    let future = r.u32("split.F")? as usize;
    let frames = r.u32("frame count")? as usize;
    let joints = r.u32("joint count")? as usize;
    let mut human = HumanDoc { joints: Vec::new() };
    let mut object = ObjectDoc {
        rot6d: Vec::new(),
        trans: Vec::new(),
    };
    for i in 0..frames {
        let what = format!("frame {i}");
        human.joints.push((0..joints).map(|_| read_vec3(&mut r, &what)).collect::<Result<_>>()?);
        let mut rot = [0.0; 6];
        for v in rot.iter_mut() {
            *v = r.f64(&what)?;
        }
        object.rot6d.push(rot);
        object.trans.push(read_vec3(&mut r, &what)?);
    }
    let n = r.u32("point count")? as usize;
    let points = (0..n).map(|_| read_vec3(&mut r, "shape points")).collect::<Result<_>>()?;
    let k = r.u32("keypoint count")? as usize;
    let keypoints = (0..k).map(|_| r.u32("keypoints").map(|v| v as usize)).collect::<Result<_>>()?;
    r.finish()?;
    from_doc(ClipDoc {
        version,
        fps,
        split: SplitDoc { past, future },
        human,
        object,
        shape: ShapeDoc { points, keypoints },
    })
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "hoib")
}

/// Writes JSON, or the binary twin when the extension is `.hoib`.
pub fn save_sequence(clip: &Clip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_binary(path) {
        std::fs::write(path, to_binary(clip))?;
    } else {
        std::fs::write(path, to_json(clip)?)?;
    }
    Ok(())
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<Clip> {
    let path = path.as_ref();
    let located = |e: Error| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    };
    if is_binary(path) {
        from_binary(&std::fs::read(path)?).map_err(located)
    } else {
        from_json(&std::fs::read_to_string(path)?).map_err(located)
    }
}

/// Sequence files in `dir`, sorted by name.
pub fn list_sequences(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json" || e == "hoib"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Clip>> {
    list_sequences(dir)?.iter().map(load_sequence).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::BodyProxy;
    use crate::data::synthetic::{generate_synthetic, Scenario};

    fn clip() -> Clip {
        generate_synthetic(&Scenario::new("swing", 36, 5), &BodyProxy::default_humanoid())
            .unwrap()
            .clip
    }

    #[test]
    fn json_and_binary_round_trip_exactly() {
        let c = clip();
        assert_eq!(from_json(&to_json(&c).unwrap()).unwrap(), c);
        assert_eq!(from_binary(&to_binary(&c)).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.json", "a.hoib"] {
            let p = dir.path().join(name);
            save_sequence(&c, &p).unwrap();
            assert_eq!(load_sequence(&p).unwrap(), c);
        }
    }

    #[test]
    fn malformed_inputs_are_parse_errors() {
        let c = clip();
        let text = to_json(&c).unwrap();
        for cut in [0, 1, 10, text.len() / 3, text.len() - 1] {
            assert!(matches!(from_json(&text[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        let bin = to_binary(&c);
        for cut in [0, 9, bin.len() / 2, bin.len() - 1] {
            assert!(matches!(from_binary(&bin[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["object"].as_object_mut().unwrap().remove("trans");
        assert!(matches!(from_json(&v.to_string()), Err(Error::Parse { .. })));
        v["version"] = "interdiff-hoi/2".into();
        assert!(matches!(from_json(&v.to_string()), Err(Error::Version { .. })));
        v["version"] = "".into();
        assert!(matches!(from_json(&v.to_string()), Err(Error::Parse { .. })));
    }

    #[test]
    fn syntax_errors_name_the_line() {
        let err = from_json("{\n\"version\": \"interdiff-hoi/1\",\n oops }").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
