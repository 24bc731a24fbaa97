fn main() {
    let args: Vec<std::ffi::OsString> = std::env::args_os().collect();
    let code = segrobust_cli::dispatch_to(
        args,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
