from setuptools import setup, find_packages

with open("requirements.txt") as f:
    requirements = f.read().splitlines()

setup(
    name='xvocab_sandbox',
    version='0.1.0',
    description="Cross-vocabulary speculative decoding sandbox",
    packages=find_packages(exclude=["test_functions"]),
    install_requires=requirements
)
