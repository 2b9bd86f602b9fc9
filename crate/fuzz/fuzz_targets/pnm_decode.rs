#![no_main]

use libfuzzer_sys::fuzz_target;
use logitshift::formats::pnm::{decode, encode, PnmKind};

fuzz_target!(|data: &[u8]| {
    let Ok(img) = decode(data) else { return };
    let kind = if img.channels == 1 { PnmKind::P5 } else { PnmKind::P6 };
    let bytes = encode(&img, kind).expect("decoded image encodes");
    assert_eq!(decode(&bytes).expect("re-decodes"), img);
    let _ = img.to_gray_tensor();
});
