from setuptools import setup, find_packages

setup(
    name="cooklab",
    version="0.1.0",
    description="Desk-scale learned dough manipulation: simulation, GNN dynamics and closed-loop planning",
    author="CookLab Team",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "pyyaml>=6.0",
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "scikit-learn>=1.3.0",
        "python-dotenv>=1.0.0",
        "jinja2>=3.1.2",
        "pydantic>=2.0.0",
    ],
    python_requires=">=3.9",
    entry_points={
        "console_scripts": [
            "cooklab=cooklab.cli:main",
        ],
    },
)
