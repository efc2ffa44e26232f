from setuptools import setup, find_packages

setup(
    name="kspace-loupe",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    package_data={
        "kspace_loupe": ["presets/*.json"],
    },
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "pillow>=9.0",
        "scikit-image>=0.19",
        "pyyaml",
        "click>=8.1.0",
    ],
    extras_require={
        "dev": ["pytest", "pytest-cov", "black", "mypy"],
    },
    entry_points={
        'console_scripts': [
            'kspace-loupe=kspace_loupe.__main__:cli',
        ],
    },
)
