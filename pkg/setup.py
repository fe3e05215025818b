from setuptools import setup, find_packages

with open('README.md', 'r') as fin:
    docs = fin.read()

setup(
    name='guarded-tuning',
    version='0.1',
    packages=find_packages(exclude=["ez_setup", "examples", "tests"]),
    url='',
    license='MIT',
    long_description=docs,
    long_description_content_type='text/markdown',
    author='patrick',
    author_email='patrick@productaize.io',
    description='privacy-preserving split fine-tuning experiments',
    install_requires=[
        'dataset',
        'numpy',
        'pyyaml',
    ],
    extras_require={
        'dev': [
            'pytest',
        ]
    },
    entry_points={
        'console_scripts': [
            'guarded-tuning=guarded_tuning.cli:main',
        ]
    },
)
