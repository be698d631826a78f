#![no_main]
use dirmask_core::dataset::parse_instances_json;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(file) = parse_instances_json(text) {
        let _ = file.to_instances();
    }
});
