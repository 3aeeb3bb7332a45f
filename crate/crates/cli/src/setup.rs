//! Turning a config into data, networks and files.

use std::fs;
use std::path::{Path, PathBuf};

use blockdistill::container::Container;
use blockdistill::data::{load_small_image_binary, translation_stream, Dataset, Split, Splits, TextureTask};
use blockdistill::netgraph::NetworkSpec;
use blockdistill::trainer::{train, Net, RunReport};

use crate::config::{DatasetConfig, DatasetKind, ExperimentConfig};
use crate::{CliError, CliResult};

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn require_file(key: &str, path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key}: file not found: {}", path.display())))
    }
}

/// Checks every input file named by the config before any work starts.
pub fn check_inputs(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.dataset.kind == DatasetKind::Binary {
        let path = cfg.dataset.path.as_deref().expect("checked at parse time");
        require_file("dataset.path", path)?;
        match &cfg.dataset.test_path {
            Some(p) => require_file("dataset.test_path", p)?,
            None => return Err(CliError::Config("dataset.test_path is required for binary datasets".into())),
        }
    }
    if cfg.train.effective_variant().needs_teacher() {
        if let Some(p) = &cfg.teacher.checkpoint {
            require_file("teacher.checkpoint", p)?;
        }
    }
    Ok(())
}

/// Loads a model checkpoint; a missing file is a configuration error.
pub fn load_checkpoint(key: &str, path: &Path) -> CliResult<Net> {
    require_file(key, path)?;
    Net::load(path).map_err(|e| CliError::Runtime(format!("{key}: {e}")))
}

fn cache_stem(d: &DatasetConfig) -> String {
    format!(
        "{:?}-s{}-c{}-z{}-p{}-t{}-n{}-m{}-v{}",
        d.kind, d.seed, d.classes, d.size, d.train_per_class, d.test_per_class, d.samples, d.test_samples, d.val_fraction
    )
    .to_lowercase()
}

fn generate(d: &DatasetConfig) -> CliResult<Splits> {
    let (pool, test) = match d.kind {
        DatasetKind::Texture => {
            let task = TextureTask::new(d.seed, d.classes, d.size)?;
            (
                task.sample(d.seed.wrapping_add(1), d.train_per_class, Split::Train),
                task.sample(d.seed.wrapping_add(2), d.test_per_class, Split::Test),
            )
        }
        DatasetKind::Translation => (
            translation_stream(d.seed, d.seed.wrapping_add(1), d.size, d.samples, Split::Train)?,
            translation_stream(d.seed, d.seed.wrapping_add(2), d.size, d.test_samples, Split::Test)?,
        ),
        DatasetKind::Binary => {
            let path = d.path.as_deref().expect("checked at parse time");
            let test = d
                .test_path
                .as_deref()
                .ok_or_else(|| CliError::Config("dataset.test_path is required for binary datasets".into()))?;
            (load_small_image_binary(path, d.limit)?, load_small_image_binary(test, d.limit)?)
        }
    };
    Ok(Splits::from_pool(pool, test, d.val_fraction, d.seed)?)
}

/// Train, validation and test sets described by the config, read from the
/// cache directory when one is configured and already filled.
pub fn load_data(d: &DatasetConfig) -> CliResult<Splits> {
    let Some(dir) = d.cache.as_ref().filter(|_| d.kind != DatasetKind::Binary) else {
        return generate(d);
    };
    let stem = cache_stem(d);
    let files: Vec<PathBuf> = ["train", "val", "test"]
        .iter()
        .map(|s| dir.join(format!("{stem}-{s}.litm")))
        .collect();
    if files.iter().all(|f| f.is_file()) {
        let read = |p: &Path| -> CliResult<Dataset> { Ok(Dataset::from_container(&Container::read_from(p)?)?) };
        return Ok(Splits {
            train: read(&files[0])?,
            val: read(&files[1])?,
            test: read(&files[2])?,
        });
    }
    let splits = generate(d)?;
    for (f, ds) in files.iter().zip([&splits.train, &splits.val, &splits.test]) {
        write(f, ds.to_container().to_bytes())?;
    }
    Ok(splits)
}

/// Input shape and class count of the data, as specs need them.
pub fn data_shape(data: &Splits) -> ([usize; 3], usize) {
    (data.train.input_shape(), data.train.classes)
}

pub fn student_spec(cfg: &ExperimentConfig, data: &Splits) -> CliResult<NetworkSpec> {
    let (shape, classes) = data_shape(data);
    let spec = cfg.student_spec(shape, classes);
    spec.validate().map_err(|e| CliError::Config(format!("student: {e}")))?;
    Ok(spec)
}

/// Teacher trained from scratch, with its report.
pub fn train_teacher(cfg: &ExperimentConfig, data: &Splits) -> CliResult<(Net, RunReport)> {
    let (shape, classes) = data_shape(data);
    let spec = cfg.teacher_spec(shape, classes);
    spec.validate().map_err(|e| CliError::Config(format!("teacher: {e}")))?;
    let tc = cfg.teacher_train_config();
    tc.validate().map_err(|e| CliError::Config(format!("teacher schedule: {e}")))?;
    Ok(train(&tc, None, &spec, data)?)
}

/// The teacher a run needs, if any: loaded from `teacher.checkpoint` or
/// trained here. A trained teacher is saved under `out` as `teacher.litm`
/// with its `teacher_metrics.csv`.
pub fn acquire_teacher(cfg: &ExperimentConfig, data: &Splits, out: &Path) -> CliResult<Option<Net>> {
    if !cfg.train.effective_variant().needs_teacher() {
        return Ok(None);
    }
    if let Some(path) = &cfg.teacher.checkpoint {
        let net = load_checkpoint("teacher.checkpoint", path)?;
        if net.spec().input_shape != data.train.input_shape() {
            return Err(CliError::Config(format!(
                "teacher.checkpoint {}: input {:?} does not match the data {:?}",
                path.display(),
                net.spec().input_shape,
                data.train.input_shape()
            )));
        }
        return Ok(Some(net));
    }
    let (net, report) = train_teacher(cfg, data)?;
    write(&out.join("teacher_metrics.csv"), report.metrics_csv())?;
    net.save(&out.join("teacher.litm"))?;
    Ok(Some(net))
}
