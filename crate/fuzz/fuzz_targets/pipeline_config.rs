#![no_main]
use dirmask_core::config::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = PipelineConfig::from_json(text) {
        let canonical = cfg.to_canonical_json().unwrap();
        assert_eq!(PipelineConfig::from_json(&canonical).unwrap(), cfg);
    }
});
