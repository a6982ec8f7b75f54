#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The first line names the target column; the rest is the CSV body.
    let Some(split) = data.iter().position(|&b| b == b'\n') else { return };
    let Ok(target) = std::str::from_utf8(&data[..split]) else { return };
    if let Ok(ds) = dspp::data::parse_csv(&data[split + 1..], &[target]) {
        assert!(ds.x.iter().chain(ds.y.iter()).all(|v| v.is_finite()));
        assert_eq!(ds.x.nrows(), ds.y.nrows());
        assert_eq!(ds.y.ncols(), 1);
    }
});
