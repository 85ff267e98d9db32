//! Model checkpoints: a config snapshot plus every parameter tensor.

use std::path::Path;

use sop2::backbone::{Model, ModelConfig};
use sop2::{Error, Result};

use crate::config::{model_text, parse_model_text};
use crate::container::Container;

const KIND: &str = "kind = checkpoint\n";

pub fn to_container(model: &Model) -> Container {
    let mut c = Container::new(format!("{KIND}{}", model_text(&model.config)));
    for (name, p) in model.params.iter() {
        c.push(name, p.value.clone());
    }
    c
}

/// Rebuilds the model described by the snapshot and fills in its tensors.
///
/// With `expected`, the snapshot must match it exactly; the error carries
/// both canonical texts.
pub fn from_container(c: &Container, expected: Option<&ModelConfig>) -> Result<Model> {
    let body = c
        .header
        .strip_prefix(KIND)
        .ok_or_else(|| Error::Format("container is not a checkpoint".into()))?;
    let config = parse_model_text(body)?;
    if let Some(want) = expected {
        let (want, found) = (model_text(want), model_text(&config));
        if want != found {
            return Err(Error::ConfigMismatch { expected: want, found });
        }
    }
    let mut model = Model::new(config)?;
    if c.tensors.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, its config defines {}",
            c.tensors.len(),
            model.params.len()
        )));
    }
    for (name, t) in &c.tensors {
        let p = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is not part of the model")))?;
        if p.value.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, config expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    to_container(model).write(path)
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    from_container(&Container::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sop2::backbone::PromptMode;

    fn small() -> ModelConfig {
        let mut m = ModelConfig::desk().with_prompts_on(PromptMode::Pool, &[2]);
        m.channels = 8;
        m.heads = 2;
        m.ffn_hidden = 8;
        m.head_channels = 8;
        m.lora = true;
        m
    }

    #[test]
    fn round_trip_restores_config_and_tensors() {
        let model = Model::new(small()).unwrap();
        let bytes = to_container(&model).to_bytes().unwrap();
        let back = from_container(&Container::from_bytes(&bytes).unwrap(), Some(&model.config)).unwrap();
        assert_eq!(back.config, model.config);
        for ((n0, p0), (n1, p1)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(n0, n1);
            for (a, b) in p0.value.data().iter().zip(p1.value.data()) {
                assert!((a - b).abs() <= 1e-6 * a.abs(), "{n0}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mismatched_snapshot_reports_both_configs() {
        let model = Model::new(small()).unwrap();
        let mut other = small();
        other.pool.size = 7;
        match from_container(&to_container(&model), Some(&other)) {
            Err(Error::ConfigMismatch { expected, found }) => {
                assert!(expected.contains("pool_size = 7"));
                assert!(found.contains("pool_size = 40"));
            }
            r => panic!("expected a mismatch, got {:?}", r.map(|m| m.config)),
        }
    }

    #[test]
    fn missing_or_extra_tensors_are_format_errors() {
        let model = Model::new(small()).unwrap();
        let mut c = to_container(&model);
        c.tensors.pop();
        assert!(matches!(from_container(&c, None), Err(Error::Format(_))));
        let mut c = to_container(&model);
        c.tensors[0].0 = "stray".into();
        assert!(matches!(from_container(&c, None), Err(Error::Format(_))));
        let c = Container::new("kind = scenes\n");
        assert!(matches!(from_container(&c, None), Err(Error::Format(_))));
    }
}
