"""
backdoorlab setup configuration.
"""

from setuptools import setup, find_packages

setup(
    name="backdoorlab",
    version="0.1.0",
    description="Backdoor attacks, fine-tuning defenses and backdoor sequela on small image classifiers",
    author="backdoorlab contributors",
    python_requires=">=3.10",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    package_data={"backdoorlab": ["config.example.yaml"]},
    install_requires=[
        "numpy>=1.26.0",
        "scipy>=1.11.0",
        "matplotlib>=3.8.0",
        "pydantic>=2.5.0",
        "pydantic-settings>=2.1.0",
        "python-dotenv>=1.0.0",
        "pyyaml>=6.0.1",
        "python-json-logger>=2.0.7",
        "orjson>=3.9.0",
        "filelock>=3.13.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.4.0",
            "pytest-asyncio>=0.21.0",
            "pytest-cov>=4.1.0",
            "pytest-mock>=3.12.0",
            "mypy>=1.7.0",
            "types-PyYAML>=6.0.12",
            "pylint>=3.0.0",
            "black>=23.11.0",
            "isort>=5.12.0",
            "flake8>=6.1.0",
        ]
    },
    entry_points={
        "console_scripts": [
            "backdoorlab=backdoorlab.main:main",
        ],
    },
)
