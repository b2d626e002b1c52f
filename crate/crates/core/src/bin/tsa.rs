use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match tsa::cli::run(std::env::args_os(), &mut out) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("tsa: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
