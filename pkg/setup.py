from setuptools import setup

# Read production requirements
with open("requirements-prod.txt", "r") as f:
    prod_requirements = [line.strip() for line in f.readlines() if line.strip()]

# Read development requirements
with open("requirements-dev.txt", "r") as f:
    dev_requirements = [line.strip() for line in f.readlines() if line.strip()]

setup(
    name="fairtrans",
    version="0.1.0",
    py_modules=[
        "artifacts",
        "augment",
        "cli",
        "cycletrans",
        "errors",
        "experiment",
        "faireval",
        "numgrad",
        "reclosses",
        "synthface",
    ],
    install_requires=prod_requirements,
    extras_require={
        "dev": dev_requirements,
    },
    entry_points={
        "console_scripts": ["fairtrans=cli:main"],
    },
    python_requires=">=3.9",
)
