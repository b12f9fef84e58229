from setuptools import setup, find_packages

with open("README.md") as f:
    desc = f.read()

extras = {
    "dev": [
        "hypothesis",
        "pytest",
        "pytest-cov",
    ]
}

setup(
    name="harmap",
    description="Spline parameterisation of planar multipatch domains by inversely harmonic maps",
    long_description=desc,
    long_description_content_type="text/markdown",
    version="0.1.0",
    license="mit",
    python_requires=">=3.9",
    classifiers=[
        'Intended Audience :: Developers',
        "Intended Audience :: Science/Research",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Topic :: Scientific/Engineering :: Mathematics",
        'License :: OSI Approved :: MIT License',
    ],
    keywords="isogeometric analysis parameterisation splines harmonic maps",
    packages=find_packages(exclude=["tests"]),
    include_package_data=True,
    package_data={"harmap": ["data/*.json"]},
    install_requires=[
        "affine",
        "numpy",
        "pydantic>=2",
        "scipy>=1.12",
        "typer",
        "xmltodict"
    ],
    test_suite="tests",
    entry_points={"console_scripts": ["harmap=harmap.scripts.cli:app"]},
    extras_require=extras,
    tests_require=extras['dev']
)
