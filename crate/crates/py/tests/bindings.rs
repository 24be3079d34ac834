use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn module_round_trip() {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(gape_py::gape_py)(py);
        let locals = PyDict::new(py);
        locals.set_item("g", m).unwrap();
        let code = c"
q = [[0.1 * (i + j) for j in range(4)] for i in range(6)]
k = [[0.2 * (i - j) for j in range(4)] for i in range(6)]
gate = ([0.5] * 4, 0.0, [0.3] * 4, 0.2, 0.5413)
a = g.attention_weights(q, k, list(range(6)), pe='rope', gate=gate, t=8.0, path='m')
b = g.attention_weights(q, k, list(range(6)), pe='rope', gate=gate, t=8.0, path='fused')
worst = max(abs(x - y) for r, s in zip(a, b) for x, y in zip(r, s))
tokens, pos, digits, target = g.niah_sample(128, 'last', seed=4)
model = g.Model(pe='alibi', gape=False, d_model=16, t_train=128, seed=1)
logits = model.predict(tokens)
shapes = g.kv_cache_shapes('rope', True, 1, 64, 2, 16)
";
        py.run(code, None, Some(&locals)).unwrap();
        let worst: f64 = locals.get_item("worst").unwrap().unwrap().extract().unwrap();
        assert!(worst < 1e-10);
        let logits: Vec<f64> = locals.get_item("logits").unwrap().unwrap().extract().unwrap();
        assert_eq!(logits.len(), 10);
        let shapes: ([usize; 4], [usize; 4]) = locals.get_item("shapes").unwrap().unwrap().extract().unwrap();
        assert_eq!(shapes.0, [1, 2, 64, 16]);
        let err = py.run(c"g.niah_sample(16, 'first')", None, Some(&locals)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}
