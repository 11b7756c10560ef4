#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use solis_core::classifier::{
    lookup_backbone, model_from_parts, sidecar_for, ClassifierModel, ModelSidecar, TrainStrategy,
};

/// Sidecar of a freshly built tinycnn; the fuzzer supplies the tensor file.
fn sidecar() -> &'static ModelSidecar {
    static SIDECAR: OnceLock<ModelSidecar> = OnceLock::new();
    SIDECAR.get_or_init(|| {
        let spec = lookup_backbone("tinycnn").unwrap();
        let model =
            ClassifierModel::uninitialized(&spec, TrainStrategy::FineTune, None, 0).unwrap();
        sidecar_for(&model, spec.mean, spec.std)
    })
}

fuzz_target!(|data: &[u8]| {
    let _ = model_from_parts(sidecar(), data);
});
