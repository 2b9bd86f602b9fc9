#![no_main]

use libfuzzer_sys::fuzz_target;
use logitshift::formats::model::{parse, write};
use logitshift::{Classifier, Tensor};

fuzz_target!(|data: &[u8]| {
    let Ok(model) = parse(data) else { return };
    // Anything accepted must survive a write/parse cycle and run forward.
    let again = parse(write(&model).as_bytes()).expect("written manifest parses");
    assert_eq!(again, model);
    let shape = model.base().input_shape().to_vec();
    if shape.iter().product::<usize>() <= 1 << 16 {
        let _ = model.forward(&Tensor::zeros(&shape));
    }
});
