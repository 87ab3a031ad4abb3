from setuptools import setup, find_packages
import re

try:
    with open("README.md", "r") as fh:
        long_description = fh.read()
except FileNotFoundError:
    long_description = "Timing side-channel experiments against non-maximum suppression in object detectors."

setup(
    name="nmsleak",
    version=re.search(r'__version__ = "(.*?)"', open("src/nmsleak/__init__.py", "r").read()).group(1),
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    package_data={
        "nmsleak": ["data/*.yaml"],
    },
    include_package_data=True,
    entry_points={
        'console_scripts': [
            'nmsleak=nmsleak.cli:main',
        ],
    },
    install_requires=[
        'numpy',
        'pandas',
        'scipy',
        'seaborn>=0.12',
        'matplotlib',
        'tqdm',
        'scikit-learn',
        'natsort',
        'palettable',
        'requests',
        'Pillow>=9.1',
        'PyYAML',
        'pydantic',
        'fastapi',
        'uvicorn',
    ],
    extras_require={
        'test': ['pytest', 'httpx'],
    },
	description='Timing side-channel experiments against non-maximum suppression in object detectors.',
	long_description=long_description,
	long_description_content_type="text/markdown",
	classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
	python_requires=">=3.8",
)
