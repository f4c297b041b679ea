from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup

ext_modules = [
    Pybind11Extension(
        "entmark._fastscan",
        ["src/native/fastscan.cpp"],
        libraries=["crypto"],
        cxx_std=17,
        extra_compile_args=["-O3"],
        define_macros=[("OPENSSL_API_COMPAT", "0x10100000L"),
                       ("OPENSSL_SUPPRESS_DEPRECATED", "1")],
    )
]

setup(ext_modules=ext_modules, cmdclass={"build_ext": build_ext})
