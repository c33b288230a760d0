from setuptools import setup, find_packages
from os.path import join, dirname

with open(join(dirname(__file__), 'README.rst')) as f:
    readme_text = f.read()

setup(
    name="hilbert-mamba",
    version="0.1.0",
    packages=find_packages(exclude=['tests']),
    description="Hilbert-ordered state-space segmentation and "
                "prompt-guided classification of 3D volumes",
    long_description=readme_text,
    license="AGPL",
    keywords="segmentation state-space hilbert-curve volumes",
    python_requires='>=3.7',
    install_requires=[
        'numpy >= 1.17',
        'scipy >= 1.4',
        'PyYAML >= 5.1',
        'requests',
    ],
    entry_points={
        'console_scripts': [
            'hilbert-mamba = hilbert_mamba.cli:main',
        ],
    },
)
