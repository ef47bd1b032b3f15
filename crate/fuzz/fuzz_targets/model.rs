#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::model::InstrumentedModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = InstrumentedModel::from_bytes(data) {
        let cfg = model.config();
        // keep forward passes cheap on large decoded shapes
        if cfg.model_dim * cfg.mlp_dim * cfg.num_layers <= 1 << 16 {
            let _ = model.forward(&[0]);
        }
    }
});
