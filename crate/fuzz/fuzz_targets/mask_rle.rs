#![no_main]
use dirmask_core::mask::Mask;
use libfuzzer_sys::fuzz_target;

// First two bytes pick the mask size, the rest is the run-length text.
fuzz_target!(|data: &[u8]| {
    let [h, w, rest @ ..] = data else {
        return;
    };
    let (h, w) = (*h as usize % 64, *w as usize % 64);
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    if let Ok(m) = Mask::from_rle_text(text, h, w) {
        assert_eq!(Mask::from_rle_text(&m.to_rle_text(), h, w).unwrap(), m);
    }
});
