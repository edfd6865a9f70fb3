#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "bratlab/gradcheck.hpp"
#include "bratlab/tensor.hpp"

namespace py = pybind11;

PYBIND11_MODULE(_bratlab, m) {
    m.doc() = "bratlab core bindings";
    m.attr("__version__") = "0.1.0";

    m.def(
        "cosine_sim",
        [](const std::vector<float>& a, const std::vector<float>& b) {
            return bratlab::cosine_sim(bratlab::Tensor::from({static_cast<int>(a.size())}, a),
                                       bratlab::Tensor::from({static_cast<int>(b.size())}, b))
                .item();
        },
        py::arg("a"), py::arg("b"));

    m.def("gradcheck_selftest", &bratlab::gradcheck_selftest);
}
