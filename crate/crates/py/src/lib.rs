use pyo3::prelude::*;

#[pymodule]
fn flowmem(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
