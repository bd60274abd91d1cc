fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    let header = std::path::Path::new(&crate_dir).join("include").join("lcmatch.h");
    std::fs::create_dir_all(header.parent().unwrap()).ok();
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        Err(e) => {
            // keep the committed header usable when cbindgen cannot run
            println!("cargo:warning=cbindgen failed, keeping existing header: {e}");
        }
    }
}
