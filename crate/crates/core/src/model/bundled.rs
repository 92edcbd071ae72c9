//! Specs shipped with the crate as JSON data.

use super::ModelSpec;
use crate::error::{Error, Result};

const BUNDLED: &[(&str, &str)] = &[
    ("mobilenet_v3_small", include_str!("../../data/mobilenet_v3_small.json")),
    ("conv_96", include_str!("../../data/conv_96.json")),
    ("irb_v2_96", include_str!("../../data/irb_v2_96.json")),
    ("irb_v3_96", include_str!("../../data/irb_v3_96.json")),
    ("toy_2block", include_str!("../../data/toy_2block.json")),
    ("toy_4block", include_str!("../../data/toy_4block.json")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

/// Looks up a bundled spec by name, with or without a `.json` suffix.
pub fn bundled_spec(name: &str) -> Result<ModelSpec> {
    let key = name.strip_suffix(".json").unwrap_or(name);
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == key)
        .ok_or_else(|| Error::spec(format!("no bundled spec named {name:?}")))?;
    ModelSpec::from_json(text)
}

fn must(name: &str) -> ModelSpec {
    bundled_spec(name).expect("bundled specs are valid")
}

/// MobileNetV3-Small at batch 8, 224x224, 1000 classes.
pub fn mobilenet_v3_small() -> ModelSpec {
    must("mobilenet_v3_small")
}

/// 96 -> 96 conv block, kernel 5, input (8, 96, 7, 7).
pub fn conv_96() -> ModelSpec {
    must("conv_96")
}

/// 96-channel IRB, expansion 1, kernel 5, input (8, 96, 7, 7).
pub fn irb_v2_96() -> ModelSpec {
    must("irb_v2_96")
}

/// Same as [`irb_v2_96`] with Hard-Swish and an SE gate.
pub fn irb_v3_96() -> ModelSpec {
    must("irb_v3_96")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec_param_count;

    #[test]
    fn all_bundled_specs_parse() {
        for n in bundled_names() {
            bundled_spec(n).unwrap();
        }
        assert!(bundled_spec("nope").is_err());
        assert_eq!(bundled_spec("toy_4block.json").unwrap().body_len(), 4);
    }

    #[test]
    fn mobilenet_v3_small_size() {
        let spec = mobilenet_v3_small();
        assert_eq!(spec.body_len(), 12);
        let n = spec_param_count(&spec).unwrap();
        assert!((2_500_000..2_600_000).contains(&n), "{n}");
    }
}
