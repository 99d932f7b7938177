from setuptools import setup

VERSION = "0.1.0"

requirements = [
    "numpy",
    "scipy",
    "pandas",
    "joblib",
    "PyYAML",
    "tox==4.*",
    "pylint_exit",
    "pylint",
    "mypy",
    "pytest",
    "pytest-cov",
]

with open("requirements.txt", "w", encoding="utf-8") as f:
    f.writelines(r + "\n" for r in requirements)

setup(
    name="matlrt",
    version=VERSION,
    packages=["matlrt", "matlrt.cli"],
    install_requires=requirements,
    entry_points={"console_scripts": ["matlrt=matlrt.cli.main:main"]},
)
