"""
Setup script for dp-tune
"""

from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="dp-tune",
    version="1.0.0",
    author="dp-tune developers",
    author_email="",
    description="Hyperparameter search for differentially private SGD: grid, evolutionary, TPE and RL strategies",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "analytics",
        "config",
        "data_collector",
        "dpsgd_engine",
        "ledger",
        "main",
        "objective",
        "optimizers",
        "privacy_accountant",
        "scheduler",
        "search_space",
    ],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    entry_points={
        "console_scripts": [
            "dp-tune=main:main",
        ],
    },
)
