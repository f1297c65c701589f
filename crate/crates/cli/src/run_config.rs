//! Flat key=value run configuration: the training config plus synthetic
//! dataset parameters and paths. Files use one `key=value` per line with `#`
//! comments; unknown keys are errors. The fully resolved configuration is
//! echoed into every output directory and can be fed back via `--config`.

use std::path::{Path, PathBuf};

use promptseg_core::data::ShapeFamily;
use promptseg_core::error::{Error, Result};
use promptseg_core::trainer::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub count: usize,
    pub test_count: usize,
    pub size: usize,
    pub shape: ShapeFamily,
    pub mean_fg: f64,
    pub mean_bg: f64,
    pub noise_sigma: f64,
    pub distractor: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            count: 4,
            test_count: 16,
            size: 32,
            shape: ShapeFamily::Ellipse,
            mean_fg: 0.8,
            mean_bg: 0.2,
            noise_sigma: 0.05,
            distractor: false,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
        }
        match key {
            "count" => self.count = parse(key, value)?,
            "test_count" => self.test_count = parse(key, value)?,
            "size" => self.size = parse(key, value)?,
            "shape" => self.shape = value.parse()?,
            "mean_fg" => self.mean_fg = parse(key, value)?,
            "mean_bg" => self.mean_bg = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "distractor" => self.distractor = parse(key, value)?,
            "data" => {
                self.data = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "out" => {
                self.out = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            _ => self.train.apply_kv(key, value)?,
        }
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        self.parse_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical key=value rendering of the fully resolved configuration.
    pub fn to_text(&self) -> String {
        let mut map = self.train.to_kv();
        map.insert("count".into(), self.count.to_string());
        map.insert("test_count".into(), self.test_count.to_string());
        map.insert("size".into(), self.size.to_string());
        map.insert("shape".into(), self.shape.to_string());
        map.insert("mean_fg".into(), self.mean_fg.to_string());
        map.insert("mean_bg".into(), self.mean_bg.to_string());
        map.insert("noise_sigma".into(), self.noise_sigma.to_string());
        map.insert("distractor".into(), self.distractor.to_string());
        map.insert(
            "data".into(),
            self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        map.insert(
            "out".into(),
            self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        let mut text = String::from("# promptseg resolved configuration\n");
        for (k, v) in map {
            text.push_str(&format!("{k}={v}\n"));
        }
        text
    }

    /// Echo the resolved configuration into `dir/config.txt`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), self.to_text())?;
        Ok(())
    }
}
