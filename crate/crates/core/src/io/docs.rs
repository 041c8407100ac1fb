//! JSON documents: corpus manifest, annotations, selection report, grounding
//! results (one record per line), evaluation summary and box prompts.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::lhad::read_dump;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::grounding::GroundingRecord;
use crate::metrics::EvalSummary;
use crate::rle;
use crate::selection::SelectionReport;
use crate::types::{AttentionDump, BBox, SampleAnnotation};

pub const MANIFEST_VERSION: u32 = 1;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("documents serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub dump_path: PathBuf,
    pub has_annotation: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub samples: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("format_version {} is not supported", self.format_version)));
        }
        let mut seen = BTreeSet::new();
        for e in &self.samples {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::format(path, format!("duplicate sample_id {:?}", e.sample_id)));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let m: CorpusManifest = parse(path, &read_text(path)?)?;
    m.validate(path)?;
    Ok(m)
}

pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    write_json(path, manifest)
}

/// Corpus backed by a manifest; dumps are read on demand.
#[derive(Debug, Clone)]
pub struct ManifestCorpus {
    base: PathBuf,
    pub manifest: CorpusManifest,
    pub strict: bool,
}

impl ManifestCorpus {
    pub fn open(path: &Path, strict: bool) -> Result<Self> {
        let manifest = read_manifest(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ManifestCorpus { base, manifest, strict })
    }

    pub fn dump_path(&self, index: usize) -> PathBuf {
        self.base.join(&self.manifest.samples[index].dump_path)
    }
}

impl Corpus for ManifestCorpus {
    fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    fn sample_id(&self, index: usize) -> Cow<'_, str> {
        Cow::Borrowed(&self.manifest.samples[index].sample_id)
    }

    fn load(&self, index: usize) -> Result<Cow<'_, AttentionDump>> {
        let path = self.dump_path(index);
        let dump = read_dump(&path, self.strict)?;
        let expected = &self.manifest.samples[index].sample_id;
        if dump.sample_id() != expected {
            return Err(Error::format(&path, format!("sample_id {:?} does not match manifest entry {expected:?}", dump.sample_id())));
        }
        Ok(Cow::Owned(dump))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationDoc {
    sample_id: String,
    image_width: u32,
    image_height: u32,
    text: String,
    gt_bbox: [u32; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_mask_rle: Option<Vec<u32>>,
}

pub fn read_annotations(path: &Path) -> Result<Vec<SampleAnnotation>> {
    let docs: Vec<AnnotationDoc> = parse(path, &read_text(path)?)?;
    let mut seen = BTreeSet::new();
    docs.into_iter()
        .enumerate()
        .map(|(i, d)| {
            let at = |msg: String| Error::format(path, format!("annotation {i} ({}): {msg}", d.sample_id));
            if !seen.insert(d.sample_id.clone()) {
                return Err(at("duplicate sample_id".into()));
            }
            let gt_bbox = BBox::try_from(d.gt_bbox).map_err(|e| at(e.to_string()))?;
            let gt_mask = d
                .gt_mask_rle
                .as_ref()
                .map(|runs| rle::decode(runs, d.image_width as usize, d.image_height as usize))
                .transpose()
                .map_err(|e| at(format!("gt_mask_rle: {e}")))?;
            let a = SampleAnnotation {
                sample_id: d.sample_id.clone(),
                image_width: d.image_width,
                image_height: d.image_height,
                text: d.text.clone(),
                gt_bbox,
                gt_mask,
            };
            a.validate().map_err(|e| at(e.to_string()))?;
            Ok(a)
        })
        .collect()
}

pub fn write_annotations(annotations: &[SampleAnnotation], path: &Path) -> Result<()> {
    let docs: Vec<AnnotationDoc> = annotations
        .iter()
        .map(|a| AnnotationDoc {
            sample_id: a.sample_id.clone(),
            image_width: a.image_width,
            image_height: a.image_height,
            text: a.text.clone(),
            gt_bbox: a.gt_bbox.into(),
            gt_mask_rle: a.gt_mask.as_ref().map(rle::encode),
        })
        .collect();
    write_json(path, &docs)
}

pub fn write_selection_report(report: &SelectionReport, path: &Path) -> Result<()> {
    write_json(path, report)
}

/// Reads and validates a report; heads outside the recorded geometry are rejected.
pub fn read_selection_report(path: &Path) -> Result<SelectionReport> {
    let report: SelectionReport = parse(path, &read_text(path)?)?;
    report.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(report)
}

pub fn write_results(records: &[GroundingRecord], path: &Path) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_results(path: &Path) -> Result<Vec<GroundingRecord>> {
    read_jsonl(path)
}

pub fn write_eval_summary(summary: &EvalSummary, path: &Path) -> Result<()> {
    write_json(path, summary)
}

pub fn read_eval_summary(path: &Path) -> Result<EvalSummary> {
    parse(path, &read_text(path)?)
}

/// Box prompt for an external mask refiner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub sample_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub bbox: BBox,
}

pub fn write_prompts(records: &[GroundingRecord], path: &Path) -> Result<()> {
    let prompts: Vec<BoxPrompt> = records
        .iter()
        .filter_map(|r| {
            Some(BoxPrompt {
                sample_id: r.sample_id.clone(),
                image_width: r.image_width,
                image_height: r.image_height,
                bbox: r.bbox_pixels?,
            })
        })
        .collect();
    write_jsonl(path, &prompts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BinaryMask;

    #[test]
    fn annotation_errors_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let write = |s: &str| fs::write(&path, s).unwrap();

        write(r#"[{"sample_id":"a","image_width":2,"image_height":2,"text":"t","gt_bbox":[0,0,1,1],"gt_mask_rle":[1,1,1]}]"#);
        let e = read_annotations(&path).unwrap_err().to_string();
        assert!(e.contains("gt_mask_rle") && e.contains("sum to 3"), "{e}");

        write(r#"[{"sample_id":"a","image_width":2,"image_height":2,"text":"t","gt_bbox":[0,0,3,1]}]"#);
        assert!(read_annotations(&path).unwrap_err().to_string().contains("outside"));

        let one = r#"{"sample_id":"a","image_width":2,"image_height":2,"text":"t","gt_bbox":[0,0,1,1]}"#;
        write(&format!("[{one},{one}]"));
        assert!(read_annotations(&path).unwrap_err().to_string().contains("duplicate"));

        write(r#"[{"sample_id":"a","image_width":2,"image_height":2,"gt_bbox":[0,0,1,1]}]"#);
        assert!(read_annotations(&path).unwrap_err().to_string().contains("missing field `text`"));
    }

    #[test]
    fn annotation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let mask = BinaryMask::new(2, 2, vec![false, true, false, true]).unwrap();
        let a = SampleAnnotation {
            sample_id: "s".into(),
            image_width: 2,
            image_height: 2,
            text: "right half".into(),
            gt_bbox: BBox::new(1, 0, 2, 2).unwrap(),
            gt_mask: Some(mask),
        };
        write_annotations(std::slice::from_ref(&a), &path).unwrap();
        assert!(read_text(&path).unwrap().contains("\"gt_mask_rle\": [\n      1,\n      1,\n      1,\n      1\n    ]"));
        assert_eq!(read_annotations(&path).unwrap(), vec![a]);
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let e = ManifestEntry { sample_id: "x".into(), dump_path: "x.lhad".into(), has_annotation: false };
        write_manifest(&CorpusManifest { format_version: 1, samples: vec![e.clone(), e] }, &path).unwrap();
        assert!(read_manifest(&path).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let rec = GroundingRecord::from_box("a", 4, 4, Some(BBox::new(0, 0, 2, 2).unwrap()));
        let mut text = serde_json::to_string(&rec).unwrap();
        text.push_str("\n{\"sample_id\": 3}\n");
        fs::write(&path, text).unwrap();
        assert!(read_results(&path).unwrap_err().to_string().contains("line 2"));
    }
}
