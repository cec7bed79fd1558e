/// Prints the reproducibility header every subcommand emits before acting.
pub fn print(command: &str, fields: &[(&str, String)]) {
    eprintln!("# atnf {command} v{}", env!("CARGO_PKG_VERSION"));
    for (k, v) in fields {
        eprintln!("# {k}: {v}");
    }
}
