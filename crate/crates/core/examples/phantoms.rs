//! Generates synthetic phantom cases and writes them in the BraTS layout.
//!
//! `cargo run --example phantoms -- /tmp/phantoms 4`

use gliomaseg::data::{list_cases, load_case};
use gliomaseg::phantoms::{make_phantom_set, write_dataset, PhantomSpec};

fn main() -> gliomaseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = args.next().unwrap_or_else(|| "phantoms".into());
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);

    let cases = make_phantom_set(count, &PhantomSpec::default())?;
    write_dataset(root.as_ref(), &cases)?;
    for id in list_cases(root.as_ref())? {
        let case = load_case(root.as_ref(), &id)?;
        let counts = case
            .labels
            .as_ref()
            .map(|l| l.class_counts())
            .unwrap_or_default();
        println!(
            "{id}: shape {:?}, canonical label counts {counts:?}",
            case.shape()
        );
    }
    Ok(())
}
