use std::io::Write;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = otkt_cli::run(&args, &mut out);
    let _ = out.flush();
    if let Err(e) = result {
        eprintln!("otkt: {e}");
        std::process::exit(e.exit_code());
    }
}
