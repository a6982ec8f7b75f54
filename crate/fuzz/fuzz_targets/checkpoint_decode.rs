#![no_main]

use dspp::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = checkpoint::decode(data) {
        // Re-encoding a decodable checkpoint preserves its parameters.
        let bytes = checkpoint::encode(&ck.model, &ck.extra).unwrap();
        assert_eq!(checkpoint::decode(&bytes).unwrap().model.params().values, ck.model.params().values);
    }
});
