//! Drag case files: an image, a mask, a prompt and point pairs, stored as
//! JSON next to the images it names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{DragConfig, EngineOverrides};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::image::{BinaryMask, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointPair {
    pub source: Point2,
    pub target: Point2,
}

/// What a benchmark expects of a case. Informational; the runner records it
/// next to the outcome.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expected {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_mean_distance: Option<f64>,
}

/// One drag case. `image` and `mask` are relative to the file's directory
/// unless absolute. Unknown top-level keys are ignored so the same file can
/// carry tool options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DragCase {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub prompt: String,
    pub points: Vec<PointPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Expected>,
    #[serde(default, skip_serializing_if = "is_empty_overrides")]
    pub engine: EngineOverrides,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn is_empty_overrides(o: &EngineOverrides) -> bool {
    *o == EngineOverrides::default()
}

impl DragCase {
    pub fn new(
        image: PathBuf,
        mask: PathBuf,
        prompt: impl Into<String>,
        points: Vec<PointPair>,
    ) -> Self {
        Self {
            image,
            mask,
            prompt: prompt.into(),
            points,
            expected: None,
            engine: EngineOverrides::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut case = Self::parse(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        case.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(case)
    }

    /// Parses a case; errors carry serde's line and column.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn image_path(&self) -> PathBuf {
        self.base_dir.join(&self.image)
    }

    pub fn mask_path(&self) -> PathBuf {
        self.base_dir.join(&self.mask)
    }

    pub fn sources(&self) -> Vec<Point2> {
        self.points.iter().map(|p| p.source).collect()
    }

    pub fn targets(&self) -> Vec<Point2> {
        self.points.iter().map(|p| p.target).collect()
    }

    /// Loads the referenced files and builds a validated engine config.
    /// `overrides` win over the case's own engine section.
    pub fn to_config(&self, overrides: &EngineOverrides) -> Result<DragConfig> {
        let image = Image::load(self.image_path())?;
        let mask = BinaryMask::load(self.mask_path())?;
        let params = overrides.over(&self.engine).resolve();
        let cfg = DragConfig::new(
            image,
            self.sources(),
            self.targets(),
            mask,
            self.prompt.clone(),
        )
        .with_params(params);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }

    /// Writes `config` as `<dir>/<name>.json` plus `<name>.png` and
    /// `<name>_mask.png`; returns the case file path.
    pub fn write_config(dir: &Path, name: &str, config: &DragConfig) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let image = PathBuf::from(format!("{name}.png"));
        let mask = PathBuf::from(format!("{name}_mask.png"));
        config.image.save_png(dir.join(&image))?;
        config.mask.save_png(dir.join(&mask))?;
        let points = config
            .sources
            .iter()
            .zip(&config.targets)
            .map(|(&source, &target)| PointPair { source, target })
            .collect();
        let case = DragCase::new(image, mask, config.prompt.clone(), points);
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, case.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Case files (`*.json`) directly inside `dir`, sorted by name.
pub fn discover_cases(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::arc_drag_config;

    #[test]
    fn parses_the_documented_shape() {
        let text = r#"{
            "image": "img.png",
            "mask": "mask.png",
            "prompt": "a cat",
            "points": [{"source": [3.5, 4], "target": [10, 12.25]}]
        }"#;
        let case = DragCase::parse(text).unwrap();
        assert_eq!(case.points[0].source, Point2::new(3.5, 4.0));
        assert_eq!(case.points[0].target, Point2::new(10.0, 12.25));
        assert_eq!(case.engine, EngineOverrides::default());
    }

    #[test]
    fn parse_errors_name_the_location() {
        let err = DragCase::parse("{\n  \"image\": \"a.png\",\n  \"prompt\": 3\n}").unwrap_err();
        assert!(err.contains("line 3"), "{err}");
        let err = DragCase::parse(
            r#"{"image":"a","mask":"b","prompt":"","points":[],"engine":{"lrr":1}}"#,
        )
        .unwrap_err();
        assert!(err.contains("lrr"), "{err}");
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = arc_drag_config(30.0);
        let path = DragCase::write_config(dir.path(), "arc", &cfg).unwrap();
        let case = DragCase::load(&path).unwrap();
        assert_eq!(case.image_path(), dir.path().join("arc.png"));
        let back = case.to_config(&EngineOverrides::default()).unwrap();
        assert_eq!(back.sources, cfg.sources);
        assert_eq!(back.targets, cfg.targets);
        assert_eq!(back.mask, cfg.mask);
        assert!(back.image.max_abs_diff(&cfg.image) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(discover_cases(dir.path()).unwrap(), vec![path]);
    }

    #[test]
    fn overrides_beat_the_case_section() {
        let dir = tempfile::tempdir().unwrap();
        let path = DragCase::write_config(dir.path(), "arc", &arc_drag_config(30.0)).unwrap();
        let mut case = DragCase::load(&path).unwrap();
        case.engine.lr = Some(0.5);
        case.engine.r2 = Some(5);
        let cli = EngineOverrides {
            lr: Some(0.2),
            ..Default::default()
        };
        let cfg = case.to_config(&cli).unwrap();
        assert_eq!(cfg.params.lr, 0.2);
        assert_eq!(cfg.params.r2, 5);
        assert_eq!(cfg.params.r1, 1);
    }

    #[test]
    fn points_outside_the_image_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = DragCase::write_config(dir.path(), "arc", &arc_drag_config(30.0)).unwrap();
        let mut case = DragCase::load(&path).unwrap();
        case.points[1].target = Point2::new(-1.0, 5.0);
        assert!(matches!(
            case.to_config(&EngineOverrides::default()),
            Err(Error::InvalidConfig(_))
        ));
    }
}
