use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use multiway::mdm::{RasterImage, Vocab};
use multiway::model::MultiwayConfig;
use multiway::{Error, Result, Tensor32};
use serde::Serialize;

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPath(path.to_path_buf()))
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    require(path)?;
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-empty lines of a text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// Tab-separated rows with exactly `fields` columns; errors carry `path:line`.
pub fn read_tsv(path: &Path, fields: usize) -> Result<Vec<Vec<String>>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<String> = line.split('\t').map(str::to_string).collect();
        if row.len() != fields {
            return Err(Error::Config(format!(
                "{}:{}: expected {fields} tab-separated fields, found {}",
                path.display(),
                i + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Resolves `name` against the directory of `list`.
pub fn sibling(list: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        list.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_image(path: &Path, config: &MultiwayConfig) -> Result<RasterImage> {
    let img = RasterImage::load(path)?;
    if img.width != config.image_size || img.height != config.image_size || img.channels != config.channels {
        return Err(Error::InvalidArgument(format!(
            "{}: image is {}x{}x{}, model expects {}x{}x{}",
            path.display(),
            img.width,
            img.height,
            img.channels,
            config.image_size,
            config.image_size,
            config.channels
        )));
    }
    Ok(img)
}

pub fn load_patches(path: &Path, config: &MultiwayConfig) -> Result<Tensor32> {
    load_image(path, config)?.patches(config.patch_size, config.channels)
}

/// Identifier of an image file: its name without extension.
pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn vocab_for(checkpoint: &Path) -> Result<Vocab> {
    Vocab::load(&checkpoint.with_file_name("vocab.txt"))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Appends JSON lines to a file.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<S: Serialize>(&mut self, record: &S) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
